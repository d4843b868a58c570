"""Sublinear geometric estimators on top of a conditional-sampling oracle."""

from .domain import Dataset, DuplicatePointError, ParameterError, Params, Point, UsageError, load_dataset, save_dataset
from .oracle import CondOracle
from .primitives import (Budgets, EstimateResult, des, distinct_values, max_binary, max_random, sum_weights,
                         support_estimation, wcond)

__version__ = "0.1.0"

__all__ = [
    "Budgets", "CondOracle", "Dataset", "DuplicatePointError", "EstimateResult", "ParameterError", "Params",
    "Point", "UsageError", "des", "distinct_values", "load_dataset", "max_binary", "max_random", "save_dataset",
    "sum_weights", "support_estimation", "wcond",
]
