"""Core value types: points, datasets, weight-function bounds and parameters."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np


class UsageError(ValueError):
    """Raised when an operation is called with malformed arguments."""


class ParameterError(ValueError):
    """Raised when a numeric parameter is outside its admissible range."""


class DuplicatePointError(UsageError):
    def __init__(self, index: int, first: int, point):
        super().__init__(f"duplicate point {tuple(point)} at index {index} (first seen at {first})")
        self.index = index
        self.first = first


class Point(tuple):
    """An integer grid point. Behaves as a tuple of ints."""

    __slots__ = ()

    def __new__(cls, coords: Iterable[int]):
        return super().__new__(cls, (int(c) for c in coords))

    @property
    def coords(self) -> tuple[int, ...]:
        return tuple(self)

    @property
    def dim(self) -> int:
        return len(self)


def squared_distance(a: Sequence[int], b: Sequence[int]) -> int:
    if len(a) != len(b):
        raise UsageError(f"dimension mismatch: {len(a)} vs {len(b)}")
    return sum((int(x) - int(y)) ** 2 for x, y in zip(a, b))


def domain_diameter(dim: int, side: int) -> float:
    if dim < 1 or side < 2:
        raise UsageError("need dim >= 1 and side >= 2")
    return math.sqrt(dim) * (side - 1)


def next_pow2(v: int) -> int:
    p = 2
    while p < v:
        p *= 2
    return p


def ceil_log2(v) -> int:
    """Smallest integer e with 2**e >= v (v > 0), computed exactly."""
    if isinstance(v, int):
        if v <= 0:
            raise ParameterError("log of non-positive value")
        return (v - 1).bit_length()
    v = Fraction(v)
    if v <= 0:
        raise ParameterError("log of non-positive value")
    num, den = v.numerator, v.denominator
    if den == 1:
        return (num - 1).bit_length()

    def covers(e: int) -> bool:  # 2^e >= num/den
        return (den << e) >= num if e >= 0 else den >= (num << -e)

    e = num.bit_length() - den.bit_length()
    while not covers(e):
        e += 1
    while covers(e - 1):
        e -= 1
    return e


@dataclass(frozen=True)
class Params:
    eps: Fraction
    delta: Fraction
    seed: int = 0

    def __post_init__(self):
        eps = Fraction(self.eps).limit_denominator(10**9) if isinstance(self.eps, float) else Fraction(self.eps)
        delta = Fraction(self.delta).limit_denominator(10**9) if isinstance(self.delta, float) else Fraction(self.delta)
        if not 0 < eps < 1:
            raise ParameterError(f"eps must lie in (0,1), got {eps}")
        if not 0 < delta < 1:
            raise ParameterError(f"delta must lie in (0,1), got {delta}")
        if not 0 <= int(self.seed) < 2**64:
            raise ParameterError("seed must be a 64-bit unsigned integer")
        object.__setattr__(self, "eps", eps)
        object.__setattr__(self, "delta", delta)
        object.__setattr__(self, "seed", int(self.seed))


def as_fraction(x) -> Fraction:
    if isinstance(x, float):
        return Fraction(x).limit_denominator(10**9)
    return Fraction(x)


class Dataset:
    """Immutable list of distinct integer points in [1, side]^dim.

    ``coords`` is a read-only (n, dim) int64 array.
    """

    def __init__(self, coords, side: int | None = None, dedupe: bool = False):
        arr = np.asarray(coords, dtype=np.int64)
        if arr.ndim == 1:
            arr = arr.reshape(-1, 1)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise UsageError("dataset needs at least one point with at least one coordinate")
        if arr.min() < 1:
            raise UsageError("coordinates must be >= 1")
        if dedupe:
            _, first = np.unique(arr, axis=0, return_index=True)
            arr = arr[np.sort(first)]
        else:
            _check_distinct(arr)
        top = int(arr.max())
        if side is None:
            side = next_pow2(top)
        side = int(side)
        if side < 2:
            raise UsageError("domain side must be >= 2")
        if top > side:
            raise UsageError(f"coordinate {top} exceeds domain side {side}")
        arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        self.coords = arr
        self.side = side
        self.dim = int(arr.shape[1])

    @classmethod
    def from_points(cls, points: Iterable[Sequence[int]], side: int | None = None, dedupe: bool = False):
        pts = [tuple(p) for p in points]
        return cls(np.array(pts, dtype=np.int64).reshape(len(pts), -1), side=side, dedupe=dedupe)

    @property
    def n(self) -> int:
        return int(self.coords.shape[0])

    def __len__(self) -> int:
        return self.n

    def __getitem__(self, i: int) -> Point:
        return Point(self.coords[i].tolist())

    @property
    def points(self) -> list[Point]:
        return [Point(row) for row in self.coords.tolist()]

    @property
    def domain_size(self) -> int:
        return self.side**self.dim

    @property
    def log_domain(self) -> int:
        """Bits needed to name a domain point: ceil(d * log2 D)."""
        return ceil_log2(self.domain_size)

    def __repr__(self) -> str:
        return f"Dataset(n={self.n}, dim={self.dim}, side={self.side})"


def _check_distinct(arr: np.ndarray) -> None:
    _, first, inverse = np.unique(arr, axis=0, return_index=True, return_inverse=True)
    if len(first) == arr.shape[0]:
        return
    inverse = inverse.reshape(-1)
    seen = np.full(len(first), -1, dtype=np.int64)
    for i, g in enumerate(inverse):
        if seen[g] >= 0:
            raise DuplicatePointError(i, int(seen[g]), arr[i])
        seen[g] = i


def point_index(coords: Sequence[int], side: int) -> int:
    """Mixed-radix index sum (x_j - 1) * D^(j-1), 0-based."""
    idx = 0
    for j in reversed(range(len(coords))):
        idx = idx * side + (int(coords[j]) - 1)
    return idx


def point_indices(coords: np.ndarray, side: int) -> np.ndarray:
    """Vectorised point_index for an (n, d) array. Needs side**d < 2**63."""
    d = coords.shape[1]
    if side**d >= 2**63:
        raise UsageError("domain too large for 64-bit point indices")
    idx = np.zeros(coords.shape[0], dtype=np.int64)
    for j in reversed(range(d)):
        idx = idx * side + (coords[:, j] - 1)
    return idx


def load_dataset(path: str | os.PathLike, dedupe: bool = False) -> Dataset:
    dim = side = None
    rows: list[list[int]] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("dims="):
                fields = dict(tok.split("=", 1) for tok in line.split())
                dim = int(fields["dims"])
                side = int(fields["side"]) if "side" in fields else None
                continue
            try:
                row = [int(tok) for tok in line.split(",")]
            except ValueError as exc:
                raise UsageError(f"{path}:{lineno}: bad point line {line!r}") from exc
            if dim is not None and len(row) != dim:
                raise UsageError(f"{path}:{lineno}: expected {dim} coordinates, got {len(row)}")
            if rows and len(row) != len(rows[0]):
                raise UsageError(f"{path}:{lineno}: inconsistent dimension")
            rows.append(row)
    if not rows:
        raise UsageError(f"{path}: no points")
    return Dataset(np.array(rows, dtype=np.int64), side=side, dedupe=dedupe)


def save_dataset(ds: Dataset, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"dims={ds.dim} side={ds.side}\n")
        for row in ds.coords.tolist():
            fh.write(",".join(str(c) for c in row) + "\n")
