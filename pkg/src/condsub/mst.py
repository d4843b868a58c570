"""Euclidean MST weight from component counts of threshold graphs.

For thresholds r_i = (1+eps)^i the weight is approximately

    n - (1+eps)^L + eps * sum_{i<L} (1+eps)^i c_i,

with c_i the number of connected components when points closer than r_i
are joined.  Each c_i is estimated on a randomly shifted grid of side
eps r_i / sqrt(d): an l0-sampled occupied cell, a breadth-first search over
adjacent occupied cells that gives up at t cells, and c_i ~ S / s.
"""

from __future__ import annotations

import bisect
import math
import time
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, NamedTuple

import numpy as np

from .domain import ParameterError, UsageError, as_fraction, domain_diameter
from .oracle import CondOracle
from .predicate import TRUE, And, CellId, GridSpec, InCellSet, NearCellSet, Not, WeightFn
from .primitives import DEFAULT_BUDGETS, Budgets, EstimateResult, des, distinct_values

__all__ = ["GridSpec", "CellTools", "LevelEstimate", "MSTConfig", "occupied_cell_predicate_tools",
           "choose_shift", "estimate_component", "estimate_ci", "estimate_mst_weight", "component_threshold"]

BIG = None  # estimate_component result for components of >= t cells


class CellTools(NamedTuple):
    cell_id: WeightFn
    in_cells: Callable
    near_cells: Callable


def occupied_cell_predicate_tools(grid: GridSpec) -> CellTools:
    """Cell-id weight function plus builders for cell-set predicates."""
    f = WeightFn(CellId(grid), grid.bound, grid.side)
    return CellTools(f, lambda cells: InCellSet(grid, tuple(cells)), lambda cells: NearCellSet(grid, tuple(cells)))


@dataclass
class MSTConfig:
    shift_coeff: float = 1.0        # shifts tried: ceil(c * log2(1 / delta_level))
    shift_eps: Fraction = Fraction(1, 2)
    m_coeff: float = 1.0            # samples per level: ceil(c * ln(2L / delta) / eps)
    skip_run: int = 1               # levels with mu ~ 1 in a row before the rest are set to 1
    max_level_override: int | None = None
    budgets: Budgets = DEFAULT_BUDGETS


@dataclass
class LevelEstimate:
    level: int
    radius: float
    mu_hat: float
    occupied_cells_estimate: float
    samples: int
    big: int
    queries: int = 0
    sizes: list = field(default_factory=list)
    skipped: bool = False
    grid: GridSpec | None = None


def component_threshold(dim: int, n_levels: int, eps) -> int:
    """t = ceil(d * log_{1+eps} W / eps), with log_{1+eps} W rounded up to L."""
    return math.ceil(dim * n_levels / float(eps))


def level_count(dim: int, side: int, eps) -> int:
    W = domain_diameter(dim, side)
    return max(1, math.ceil(math.log(W) / math.log1p(float(eps)) - 1e-12))


# ================================================================ shifts

def _random_shift(grid_r: int, dim: int, rng) -> tuple:
    return tuple(int(v) for v in rng.integers(0, grid_r, size=dim))


def choose_shift(oracle: CondOracle, level: int, eps, delta, rng=None, config: MSTConfig | None = None,
                 label: str = "shift") -> tuple[GridSpec, dict]:
    """Among ceil(c log2(1/delta)) random shifts keep the one whose estimated
    number of occupied cells is smallest.

    When the cell side is at most 1 every cell holds at most one lattice
    point, so all shifts occupy exactly n cells and one random shift is used.
    """
    cfg = config or MSTConfig()
    rng = np.random.default_rng(rng)
    base = GridSpec.build(level, eps, oracle.dim, oracle.side)
    if base.side_scaled <= 1 << 20:
        g = GridSpec.build(level, eps, oracle.dim, oracle.side, _random_shift(base.side_scaled, oracle.dim, rng))
        return g, {"tried": 1, "counts": [oracle.n], "exact": True}
    reps = max(1, math.ceil(cfg.shift_coeff * math.log2(1 / float(delta))))
    best, best_count, counts = None, math.inf, []
    with oracle.scope(label):
        for _ in range(reps):
            g = GridSpec.build(level, eps, oracle.dim, oracle.side, _random_shift(base.side_scaled, oracle.dim, rng))
            f = occupied_cell_predicate_tools(g).cell_id
            est = distinct_values(oracle, TRUE, f, cfg.shift_eps, delta / (2 * reps), rng, cfg.budgets, "dv")
            counts.append(float(est.value))
            if est.value < best_count:
                best, best_count = g, est.value
    return best, {"tried": reps, "counts": counts, "exact": False}


# ================================================================ one component

def estimate_component(oracle: CondOracle, grid: GridSpec, t: int, delta, rng=None,
                       budgets: Budgets = DEFAULT_BUDGETS, label: str = "component"):
    """Cells in the component of an l0-sampled occupied cell, or BIG (None)
    once t cells have been found.  Returns (size or None, start cell id)."""
    rng = np.random.default_rng(rng)
    tools = occupied_cell_predicate_tools(grid)
    f = tools.cell_id
    with oracle.scope(label):
        eps_tv = Fraction(1, max(2, f.bound))
        x0 = des(oracle, TRUE, f, eps_tv, delta, rng, budgets, "l0")
        if x0 is None:
            return 0, None
        start = f.value(x0)
        U, seen = [start], {start}
        while len(U) < t:
            cells, cs = tuple(U), frozenset(seen)
            pred = And((NearCellSet.from_sorted(grid, cells, cs), Not(InCellSet.from_sorted(grid, cells, cs))))
            hit = oracle.cond(pred, "bfs")
            if hit is None:
                return len(U), start
            c = f.value(hit[1])
            bisect.insort(U, c)
            seen.add(c)
    return BIG, start


# ================================================================ one level

def estimate_ci(oracle: CondOracle, level: int, grid: GridSpec, eps, delta, t: int, m: int, rng=None,
                config: MSTConfig | None = None, occupied=None, label: str = "level") -> LevelEstimate:
    """Average of m single-sample estimates S/s (1 for a BIG component)."""
    cfg = config or MSTConfig()
    rng = np.random.default_rng(rng)
    q0 = oracle.query_count
    with oracle.scope(f"{label}{level}"):
        if occupied is None:
            f = occupied_cell_predicate_tools(grid).cell_id
            occupied = float(distinct_values(oracle, TRUE, f, eps, delta / 2, rng, cfg.budgets, "cells").value)
        S = max(1.0, float(occupied))
        total, big, sizes = 0.0, 0, []
        d_sample = delta / (2 * m)
        for _ in range(m):
            s, _ = estimate_component(oracle, grid, t, d_sample, rng, cfg.budgets)
            if s is BIG:
                big += 1
                total += 1.0
            else:
                sizes.append(s)
                total += S / max(s, 1)
        mu = total / m
    return LevelEstimate(level, float((1 + Fraction(eps)) ** level), mu, S, m, big,
                         oracle.query_count - q0, sizes, False, grid)


def _near_one(lv: LevelEstimate, eps) -> bool:
    return lv.mu_hat <= 1 + float(eps)


# ================================================================ full estimate

def estimate_mst_weight(oracle: CondOracle, eps, delta, rng=None, config: MSTConfig | None = None,
                        label: str = "mst") -> EstimateResult:
    """(1 +- O(eps)) estimate of the Euclidean MST weight."""
    cfg = config or MSTConfig()
    eps, delta = as_fraction(eps), as_fraction(delta)
    if not 0 < eps < 1 or not 0 < delta < 1:
        raise ParameterError("need eps, delta in (0, 1)")
    if oracle.n < 2:
        raise UsageError("MST estimation needs n >= 2")
    rng = np.random.default_rng(rng)
    t0 = time.perf_counter()
    q0, c0 = oracle.query_count, oracle.total_description_size
    L = level_count(oracle.dim, oracle.side, eps)
    t = component_threshold(oracle.dim, L, eps)
    M = L if cfg.max_level_override is None else max(1, min(L, cfg.max_level_override))
    m = max(1, math.ceil(cfg.m_coeff * math.log(2 * L / float(delta)) / float(eps)))
    d_level = delta / L
    levels: list[LevelEstimate] = []
    run = 0
    with oracle.scope(label):
        for i in range(M):
            if run >= cfg.skip_run:
                levels.append(LevelEstimate(i, float((1 + eps) ** i), 1.0, 1.0, 0, 0, skipped=True))
                continue
            grid, info = choose_shift(oracle, i, eps, d_level / 3, rng, cfg, f"shift{i}")
            occupied = oracle.n if info["exact"] else None
            lv = estimate_ci(oracle, i, grid, eps, d_level / 3, t, m, rng, cfg, occupied)
            levels.append(lv)
            run = run + 1 if _near_one(lv, eps) else 0
    base = 1 + eps
    top = float(base**L)
    # levels beyond an override count as fully connected
    total = sum(float(eps) * lv.radius * lv.mu_hat for lv in levels)
    total += sum(float(eps) * float(base**i) for i in range(M, L))
    value = max(0.0, oracle.n - top + total)
    return EstimateResult(value, eps, delta, oracle.query_count - q0, oracle.total_description_size - c0,
                          {"levels": levels, "L": L, "t": t, "m": m, "wall_ms": (time.perf_counter() - t0) * 1e3})
