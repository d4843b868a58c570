"""Expression trees describing subsets of the domain and integer weight maps.

Every node supports scalar evaluation on one point (``eval``) and
vectorised selection over the dataset held by an ``EvalContext``
(``select``).  ``select(ctx, idx)`` receives a sorted int64 array of
candidate point indices (or ``None`` for all points) and returns the sorted
subset where the predicate holds.
"""

from __future__ import annotations

import json
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property
from typing import Sequence

import numpy as np

from .domain import Point, UsageError, ceil_log2, point_index, point_indices

OPS = {
    "<": np.less,
    "<=": np.less_equal,
    "==": np.equal,
    ">=": np.greater_equal,
    ">": np.greater,
}
_ALIASES = {"≤": "<=", "≥": ">=", "=": "==", "<": "<", ">": ">", "<=": "<=", ">=": ">=", "==": "=="}
_PYOPS = {
    "<": lambda a, b: a < b,
    "<=": lambda a, b: a <= b,
    "==": lambda a, b: a == b,
    ">=": lambda a, b: a >= b,
    ">": lambda a, b: a > b,
}


def _op(op: str) -> str:
    try:
        return _ALIASES[op]
    except KeyError:
        raise UsageError(f"unknown comparison {op!r}") from None


def _all(ctx, idx):
    return np.arange(ctx.n, dtype=np.int64) if idx is None else idx


# ================================================================ weights

class WeightExpr:
    """Integer-valued expression over a point."""

    kind = "?"
    cache_values = True

    def value(self, x) -> int:
        raise NotImplementedError

    def bounds(self, side: int) -> tuple[int, int]:
        raise NotImplementedError

    def size(self) -> int:
        raise NotImplementedError

    def _compute(self, ctx, idx) -> np.ndarray:
        raise NotImplementedError

    def values(self, ctx, idx=None) -> np.ndarray:
        """int64 values at the points ``idx`` (all points if None)."""
        if self.cache_values:
            full = ctx.cached_values(self)
            return full if idx is None else full[idx]
        return self._compute(ctx, idx)

    def to_json(self) -> dict:
        raise NotImplementedError

    # sugar
    def __repr__(self):
        return json.dumps(self.to_json())


@dataclass(frozen=True, eq=False, repr=False)
class Const(WeightExpr):
    c: int
    kind = "Const"
    cache_values = False

    def value(self, x):
        return self.c

    def bounds(self, side):
        return self.c, self.c

    def size(self):
        return 1

    def _compute(self, ctx, idx):
        return np.full(ctx.n if idx is None else len(idx), self.c, dtype=np.int64)

    def to_json(self):
        return {"kind": self.kind, "c": self.c}


@dataclass(frozen=True, eq=False, repr=False)
class Coord(WeightExpr):
    axis: int
    kind = "Coord"
    cache_values = False

    def value(self, x):
        return int(x[self.axis])

    def bounds(self, side):
        return 1, side

    def size(self):
        return 1

    def _compute(self, ctx, idx):
        col = ctx.coords[:, self.axis]
        return col if idx is None else col[idx]

    def to_json(self):
        return {"kind": self.kind, "axis": self.axis}


@dataclass(frozen=True, eq=False, repr=False)
class SqDistTo(WeightExpr):
    center: tuple
    kind = "SqDistTo"

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(int(c) for c in self.center))

    def value(self, x):
        return sum((int(a) - b) ** 2 for a, b in zip(x, self.center))

    def bounds(self, side):
        return 0, sum(max(c - 1, side - c) ** 2 for c in self.center)

    def size(self):
        return 1

    def _compute(self, ctx, idx):
        pts = ctx.coords if idx is None else ctx.coords[idx]
        diff = pts - np.asarray(self.center, dtype=np.int64)
        return np.einsum("ij,ij->i", diff, diff)

    def to_json(self):
        return {"kind": self.kind, "center": list(self.center)}


class _Nary(WeightExpr):
    children: tuple

    def size(self):
        return self._size

    @cached_property
    def _size(self):
        return 1 + sum(c.size() for c in self.children)

    def to_json(self):
        return {"kind": self.kind, "children": [c.to_json() for c in self.children]}


@dataclass(frozen=True, eq=False, repr=False)
class Min(_Nary):
    children: tuple
    kind = "Min"

    def value(self, x):
        return min(c.value(x) for c in self.children)

    def bounds(self, side):
        bs = [c.bounds(side) for c in self.children]
        return min(b[0] for b in bs), min(b[1] for b in bs)

    def _compute(self, ctx, idx):
        out = self.children[0].values(ctx, idx).copy()
        for c in self.children[1:]:
            np.minimum(out, c.values(ctx, idx), out=out)
        return out


@dataclass(frozen=True, eq=False, repr=False)
class Max(_Nary):
    children: tuple
    kind = "Max"

    def value(self, x):
        return max(c.value(x) for c in self.children)

    def bounds(self, side):
        bs = [c.bounds(side) for c in self.children]
        return max(b[0] for b in bs), max(b[1] for b in bs)

    def _compute(self, ctx, idx):
        out = self.children[0].values(ctx, idx).copy()
        for c in self.children[1:]:
            np.maximum(out, c.values(ctx, idx), out=out)
        return out


@dataclass(frozen=True, eq=False, repr=False)
class Add(_Nary):
    children: tuple
    kind = "Add"

    def value(self, x):
        return sum(c.value(x) for c in self.children)

    def bounds(self, side):
        bs = [c.bounds(side) for c in self.children]
        return sum(b[0] for b in bs), sum(b[1] for b in bs)

    def _compute(self, ctx, idx):
        out = self.children[0].values(ctx, idx).copy()
        for c in self.children[1:]:
            out += c.values(ctx, idx)
        return out


@dataclass(frozen=True, eq=False, repr=False)
class Mul(_Nary):
    children: tuple
    kind = "Mul"

    def value(self, x):
        v = 1
        for c in self.children:
            v *= c.value(x)
        return v

    def bounds(self, side):
        lo, hi = 1, 1
        for c in self.children:
            a, b = c.bounds(side)
            cands = [lo * a, lo * b, hi * a, hi * b]
            lo, hi = min(cands), max(cands)
        return lo, hi

    def _compute(self, ctx, idx):
        out = self.children[0].values(ctx, idx).copy()
        for c in self.children[1:]:
            out *= c.values(ctx, idx)
        return out


@dataclass(frozen=True, eq=False, repr=False)
class ClampToRange(WeightExpr):
    child: WeightExpr
    lo: int
    hi: int
    kind = "ClampToRange"

    def value(self, x):
        return min(max(self.child.value(x), self.lo), self.hi)

    def bounds(self, side):
        a, b = self.child.bounds(side)
        return min(max(a, self.lo), self.hi), min(max(b, self.lo), self.hi)

    def size(self):
        return 1 + self.child.size()

    def _compute(self, ctx, idx):
        return np.clip(self.child.values(ctx, idx), self.lo, self.hi)

    def to_json(self):
        return {"kind": self.kind, "lo": self.lo, "hi": self.hi, "child": self.child.to_json()}


@dataclass(frozen=True, eq=False, repr=False)
class FloorDiv(WeightExpr):
    """floor(child / q) + offset, e.g. bucketed coordinates."""

    child: WeightExpr
    q: int
    offset: int = 1
    kind = "FloorDiv"

    def value(self, x):
        return self.child.value(x) // self.q + self.offset

    def bounds(self, side):
        a, b = self.child.bounds(side)
        return a // self.q + self.offset, b // self.q + self.offset

    def size(self):
        return 1 + self.child.size()

    def _compute(self, ctx, idx):
        return self.child.values(ctx, idx) // self.q + self.offset

    def to_json(self):
        return {"kind": self.kind, "q": self.q, "offset": self.offset, "child": self.child.to_json()}


@dataclass(frozen=True, eq=False, repr=False)
class CellId(WeightExpr):
    """Id in [1, grid.bound] of the grid cell containing the point."""

    grid: "GridSpec"
    kind = "CellId"

    def value(self, x):
        return self.grid.cell_id(self.grid.cell_of(x))

    def bounds(self, side):
        return 1, self.grid.bound

    def size(self):
        return 1 + self.grid.id_width

    def values(self, ctx, idx=None):
        ids = ctx.grid_index(self.grid).pt_ids
        return ids if idx is None else ids[idx]

    def to_json(self):
        return {"kind": self.kind, "grid": self.grid.to_json()}


@dataclass(frozen=True, eq=False, repr=False)
class HashOf(WeightExpr):
    """Pseudorandom hash 1 + h(key(x) - 1) with values in [1, 2^bits]."""

    spec: object  # prg.HashSpec
    kind = "HashOf"

    def value(self, x):
        return self.spec.value_scalar(self.spec.key.value(x) - 1)

    def bounds(self, side):
        return 1, 2**self.spec.bits

    def size(self):
        return 1 + self.spec.key.size() + self.spec.charge

    def _compute(self, ctx, idx):
        return ctx.backend.hash_values(self, ctx, idx)

    def to_json(self):
        return {"kind": self.kind, "bits": self.spec.bits, "seed": self.spec.seed,
                "key": self.spec.key.expr.to_json()}


def tournament_min(children: Sequence[WeightExpr]) -> WeightExpr:
    """Balanced binary Min tree over the children."""
    nodes = list(children)
    if not nodes:
        raise UsageError("empty min")
    while len(nodes) > 1:
        nxt = [Min((nodes[i], nodes[i + 1])) for i in range(0, len(nodes) - 1, 2)]
        if len(nodes) % 2:
            nxt.append(nodes[-1])
        nodes = nxt
    return nodes[0]


class WeightFn:
    """A WeightExpr together with its declared range [1, bound].

    Interval analysis over the domain box [1, side]^d must confirm the range;
    with ``allow_zero`` the lower end may be 0 (zero-weight points are then
    outside the support and callers conjoin ``f > 0``).
    """

    def __init__(self, expr: WeightExpr, bound: int, side: int, allow_zero: bool = False):
        lo, hi = expr.bounds(side)
        if hi > bound:
            raise UsageError(f"weight can reach {hi} > declared bound {bound}")
        if lo < (0 if allow_zero else 1):
            raise UsageError(f"weight can reach {lo}, below the admissible minimum")
        if bound > 2**62:
            raise UsageError("weight bound too large for 64-bit evaluation")
        self.expr = expr
        self.bound = int(bound)
        self.side = int(side)
        self.allow_zero = allow_zero

    def value(self, x) -> int:
        return self.expr.value(x)

    def values(self, ctx, idx=None) -> np.ndarray:
        return self.expr.values(ctx, idx)

    def size(self) -> int:
        return self.expr.size()

    def __repr__(self):
        return f"WeightFn(bound={self.bound}, expr={self.expr!r})"


def weight_fn(expr: WeightExpr, side: int, allow_zero: bool = False) -> WeightFn:
    """WeightFn whose bound is the interval-analysis maximum."""
    return WeightFn(expr, max(1, expr.bounds(side)[1]), side, allow_zero=allow_zero)


# ================================================================ grids

SHIFT_BITS = 20


@dataclass(frozen=True, eq=False)
class GridSpec:
    """Axis-aligned grid with side R = side_scaled / 2^20 and a shift.

    The cell of x is floor((x - shift) / R) componentwise, computed in
    fixed point.  Two cells are adjacent iff the squared norm of their
    index difference is at most ``adj_sq``.
    """

    level: int
    dim: int
    side: int
    side_scaled: int
    shift_scaled: tuple
    adj_sq: int

    def __post_init__(self):
        if self.side_scaled < 1:
            raise UsageError("grid side must be positive")
        sh = tuple(int(v) for v in self.shift_scaled)
        if len(sh) != self.dim or any(not 0 <= v < self.side_scaled for v in sh):
            raise UsageError("shift must lie in [0, R)^d")
        object.__setattr__(self, "shift_scaled", sh)

    @classmethod
    def build(cls, level: int, eps, dim: int, side: int, shift_scaled=None, radius=None) -> "GridSpec":
        """Grid of side eps*(1+eps)^level/sqrt(dim) whose adjacency radius is
        (1+eps)^level (or ``radius``)."""
        eps = Fraction(eps)
        rad = Fraction(radius) if radius is not None else (1 + eps) ** level
        q = (eps * (1 + eps) ** level) ** 2 * 4**SHIFT_BITS / dim
        r_s = math.isqrt(q.numerator // q.denominator)
        r_s = max(r_s, 1)
        adj = rad**2 * 4**SHIFT_BITS / r_s**2
        adj_sq = adj.numerator // adj.denominator
        if shift_scaled is None:
            shift_scaled = (0,) * dim
        return cls(level, dim, side, r_s, tuple(shift_scaled), adj_sq)

    @property
    def side_length(self) -> Fraction:
        return Fraction(self.side_scaled, 2**SHIFT_BITS)

    @property
    def shift(self) -> tuple:
        return tuple(Fraction(v, 2**SHIFT_BITS) for v in self.shift_scaled)

    def cell_of(self, x) -> tuple:
        return tuple(((int(c) << SHIFT_BITS) - v) // self.side_scaled for c, v in zip(x, self.shift_scaled))

    def cells_of(self, coords: np.ndarray) -> np.ndarray:
        return ((coords << SHIFT_BITS) - np.asarray(self.shift_scaled, dtype=np.int64)) // self.side_scaled

    @cached_property
    def _lo(self) -> tuple:
        return tuple(((1 << SHIFT_BITS) - v) // self.side_scaled for v in self.shift_scaled)

    @cached_property
    def _extent(self) -> tuple:
        return tuple(((self.side << SHIFT_BITS) - v) // self.side_scaled - lo + 1
                     for v, lo in zip(self.shift_scaled, self._lo))

    @cached_property
    def bound(self) -> int:
        return math.prod(self._extent)

    @property
    def id_width(self) -> int:
        return ceil_log2(self.side**self.dim)

    def cell_id(self, cell) -> int:
        idx, mul = 0, 1
        for c, lo, ext in zip(cell, self._lo, self._extent):
            if not lo <= c < lo + ext:
                raise UsageError(f"cell {cell} outside the grid")
            idx += (c - lo) * mul
            mul *= ext
        return idx + 1

    def ids_of_cells(self, cells: np.ndarray) -> np.ndarray:
        ids = np.zeros(cells.shape[0], dtype=np.int64)
        mul = 1
        for j in range(self.dim):
            ids += (cells[:, j] - self._lo[j]) * mul
            mul *= self._extent[j]
        return ids + 1

    def decode(self, cid: int) -> tuple:
        v = cid - 1
        out = []
        for lo, ext in zip(self._lo, self._extent):
            v, r = divmod(v, ext)
            out.append(r + lo)
        return tuple(out)

    def adjacent(self, a, b) -> bool:
        return sum((x - y) ** 2 for x, y in zip(a, b)) <= self.adj_sq

    def to_json(self) -> dict:
        return {"level": self.level, "R_scaled": self.side_scaled, "shift_scaled": list(self.shift_scaled),
                "adj_sq": self.adj_sq}


class GridIndex:
    """Occupied cells of one grid over a dataset, with neighbour lists."""

    def __init__(self, grid: GridSpec, coords: np.ndarray):
        self.grid = grid
        cells = grid.cells_of(coords)
        ids = grid.ids_of_cells(cells)
        uniq, first, inv = np.unique(ids, return_index=True, return_inverse=True)
        self.pt_ids = ids
        self.ids = uniq
        self.pt_pos = inv.reshape(-1)
        self.cell_coords = cells[first]
        order = np.argsort(self.pt_pos, kind="stable")
        self.order = order
        self.starts = np.searchsorted(self.pt_pos[order], np.arange(len(uniq) + 1))
        self._tree = None
        self._nbrs: dict[int, np.ndarray] = {}
        self._near_key = None
        self._near = None

    @property
    def n_occupied(self) -> int:
        return len(self.ids)

    def positions(self, cell_ids) -> np.ndarray:
        """Occupied-cell positions of the given ids (absent ids dropped)."""
        cell_ids = np.asarray(cell_ids, dtype=np.int64)
        pos = np.searchsorted(self.ids, cell_ids)
        pos = np.minimum(pos, len(self.ids) - 1)
        return pos[self.ids[pos] == cell_ids]

    def neighbours_of_cell(self, cell) -> np.ndarray:
        from scipy.spatial import cKDTree

        if self._tree is None:
            self._tree = cKDTree(self.cell_coords)
        cand = np.asarray(self._tree.query_ball_point(np.asarray(cell, float), math.sqrt(self.grid.adj_sq) + 0.5),
                          dtype=np.int64)
        if cand.size == 0:
            return cand
        diff = self.cell_coords[cand] - np.asarray(cell, dtype=np.int64)
        return np.sort(cand[np.einsum("ij,ij->i", diff, diff) <= self.grid.adj_sq])

    def neighbours(self, cid: int) -> np.ndarray:
        got = self._nbrs.get(cid)
        if got is None:
            got = self.neighbours_of_cell(self.grid.decode(cid))
            self._nbrs[cid] = got
        return got

    def near_mask(self, cells: frozenset) -> np.ndarray:
        """Boolean mask over occupied cells adjacent to some cell in ``cells``."""
        if self._near_key is not None and self._near_key <= cells and len(cells) - len(self._near_key) <= 64:
            near = self._near.copy()
            new = cells - self._near_key
        else:
            near = np.zeros(len(self.ids), dtype=bool)
            new = cells
        for cid in new:
            near[self.neighbours(cid)] = True
        self._near_key, self._near = cells, near
        return near

    def points_of(self, pos: np.ndarray) -> np.ndarray:
        if len(pos) == 0:
            return np.zeros(0, dtype=np.int64)
        if len(pos) <= 8:
            parts = [self.order[self.starts[p]:self.starts[p + 1]] for p in pos]
            return np.sort(np.concatenate(parts))
        mask = np.zeros(len(self.ids), dtype=bool)
        mask[pos] = True
        return self.points_in(mask)

    def points_in(self, cell_mask: np.ndarray) -> np.ndarray:
        """Sorted point positions whose cell is flagged in ``cell_mask``."""
        return np.flatnonzero(cell_mask[self.pt_pos])


def _drop_sorted(cand: np.ndarray, sub: np.ndarray) -> np.ndarray:
    """cand minus sub, where sub is a sorted subset of the sorted array cand."""
    if len(sub) == 0:
        return cand
    keep = np.ones(len(cand), dtype=bool)
    keep[np.searchsorted(cand, sub)] = False
    return cand[keep]


# ================================================================ predicates

class Predicate:
    kind = "?"
    cacheable = False  # full-dataset mask worth caching
    randomised = False
    cost = 0  # evaluation order hint inside And/Or

    def eval(self, x) -> bool:
        raise NotImplementedError

    def size(self) -> int:
        return 1

    def _mask(self, ctx, idx) -> np.ndarray:
        """Boolean mask aligned with idx (or all points)."""
        raise NotImplementedError

    def select(self, ctx, idx=None) -> np.ndarray:
        if self.cacheable:
            full = ctx.cached_mask(self)
            if idx is None:
                return np.flatnonzero(full)
            return idx[full[idx]]
        cand = _all(ctx, idx)
        return cand[self._mask(ctx, idx)]

    def to_json(self) -> dict:
        return {"kind": self.kind}

    def __repr__(self):
        return json.dumps(self.to_json())

    def __and__(self, other):
        return And((self, other))

    def __or__(self, other):
        return Or((self, other))

    def __invert__(self):
        return Not(self)


class ConstTrue(Predicate):
    kind = "ConstTrue"

    def eval(self, x):
        return True

    def select(self, ctx, idx=None):
        return _all(ctx, idx)


class ConstFalse(Predicate):
    kind = "ConstFalse"

    def eval(self, x):
        return False

    def select(self, ctx, idx=None):
        return np.zeros(0, dtype=np.int64)


TRUE = ConstTrue()
FALSE = ConstFalse()


@dataclass(frozen=True, eq=False, repr=False)
class CoordCompare(Predicate):
    axis: int
    op: str
    threshold: int
    kind = "CoordCompare"

    def __post_init__(self):
        object.__setattr__(self, "op", _op(self.op))
        object.__setattr__(self, "threshold", int(self.threshold))

    def eval(self, x):
        return _PYOPS[self.op](int(x[self.axis]), self.threshold)

    def _mask(self, ctx, idx):
        col = ctx.coords[:, self.axis] if idx is None else ctx.coords[idx, self.axis]
        return OPS[self.op](col, self.threshold)

    def to_json(self):
        return {"kind": self.kind, "axis": self.axis, "op": self.op, "threshold": self.threshold}


@dataclass(frozen=True, eq=False, repr=False)
class SqDistCompare(Predicate):
    center: tuple
    op: str
    threshold: int
    kind = "SqDistCompare"
    cacheable = True

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(int(c) for c in self.center))
        object.__setattr__(self, "op", _op(self.op))
        object.__setattr__(self, "threshold", int(self.threshold))

    def eval(self, x):
        d2 = sum((int(a) - b) ** 2 for a, b in zip(x, self.center))
        return _PYOPS[self.op](d2, self.threshold)

    def _mask(self, ctx, idx):
        pts = ctx.coords if idx is None else ctx.coords[idx]
        diff = pts - np.asarray(self.center, dtype=np.int64)
        return OPS[self.op](np.einsum("ij,ij->i", diff, diff), self.threshold)

    def select(self, ctx, idx=None):
        if idx is None and ctx.use_kdtree and self.op in ("<", "<="):
            return ctx.ball_query(self.center, self.threshold, self.op)
        return super().select(ctx, idx)

    def to_json(self):
        return {"kind": self.kind, "center": list(self.center), "op": self.op, "threshold": self.threshold}


@dataclass(frozen=True, eq=False, repr=False)
class HalfSpace(Predicate):
    """sum_j coeffs[j] * x_j  op  threshold, integer coefficients."""

    coeffs: tuple
    op: str
    threshold: int
    kind = "HalfSpace"
    cacheable = True

    def __post_init__(self):
        object.__setattr__(self, "coeffs", tuple(int(c) for c in self.coeffs))
        object.__setattr__(self, "op", _op(self.op))
        object.__setattr__(self, "threshold", int(self.threshold))

    def eval(self, x):
        return _PYOPS[self.op](sum(a * int(c) for a, c in zip(self.coeffs, x)), self.threshold)

    def _mask(self, ctx, idx):
        pts = ctx.coords if idx is None else ctx.coords[idx]
        return OPS[self.op](pts @ np.asarray(self.coeffs, dtype=np.int64), self.threshold)

    def to_json(self):
        return {"kind": self.kind, "coeffs": list(self.coeffs), "op": self.op, "threshold": self.threshold}


def _expr(w):
    return w.expr if isinstance(w, WeightFn) else w


@dataclass(frozen=True, eq=False, repr=False)
class WeightCompare(Predicate):
    weight: WeightExpr
    op: str
    threshold: int
    kind = "WeightCompare"

    def __post_init__(self):
        object.__setattr__(self, "weight", _expr(self.weight))
        object.__setattr__(self, "op", _op(self.op))
        object.__setattr__(self, "threshold", int(self.threshold))

    @property
    def cacheable(self):
        return self.weight.cache_values

    def eval(self, x):
        return _PYOPS[self.op](self.weight.value(x), self.threshold)

    def _mask(self, ctx, idx):
        return OPS[self.op](self.weight.values(ctx, idx), self.threshold)

    def size(self):
        return 1 + self.weight.size()

    def to_json(self):
        return {"kind": self.kind, "op": self.op, "threshold": self.threshold, "weight": self.weight.to_json()}


@dataclass(frozen=True, eq=False, repr=False)
class NotEqualPoint(Predicate):
    p: tuple
    kind = "NotEqualPoint"

    def __post_init__(self):
        object.__setattr__(self, "p", tuple(int(c) for c in self.p))

    def eval(self, x):
        return tuple(int(c) for c in x) != self.p

    def _mask(self, ctx, idx):
        pts = ctx.coords if idx is None else ctx.coords[idx]
        return np.any(pts != np.asarray(self.p, dtype=np.int64), axis=1)

    def to_json(self):
        return {"kind": self.kind, "p": list(self.p)}


@dataclass(frozen=True, eq=False, repr=False)
class InCellSet(Predicate):
    grid: GridSpec
    cells: tuple
    kind = "InCellSet"

    def __post_init__(self):
        object.__setattr__(self, "cells", tuple(sorted(set(int(c) for c in self.cells))))

    @classmethod
    def from_sorted(cls, grid: GridSpec, cells: tuple, cellset: frozenset | None = None):
        """Skip normalisation for a tuple of distinct ints already in order."""
        obj = object.__new__(cls)
        object.__setattr__(obj, "grid", grid)
        object.__setattr__(obj, "cells", cells)
        if cellset is not None:
            obj.__dict__["cellset"] = cellset
        return obj

    @cached_property
    def cellset(self) -> frozenset:
        return frozenset(self.cells)

    def eval(self, x):
        return self.grid.cell_id(self.grid.cell_of(x)) in self.cellset

    def size(self):
        return 1 + len(self.cells) * self.grid.id_width

    def select(self, ctx, idx=None):
        gi = ctx.grid_index(self.grid)
        pos = gi.positions(self.cells)
        if idx is None:
            return gi.points_of(pos)
        inside = np.zeros(gi.n_occupied, dtype=bool)
        inside[pos] = True
        return idx[inside[gi.pt_pos[idx]]]

    def to_json(self):
        return {"kind": self.kind, "grid": self.grid.to_json(), "cells": list(self.cells)}


@dataclass(frozen=True, eq=False, repr=False)
class NearCellSet(Predicate):
    """True when the point's cell is adjacent to (or equal to) a listed cell."""

    grid: GridSpec
    cells: tuple
    kind = "NearCellSet"

    def __post_init__(self):
        object.__setattr__(self, "cells", tuple(sorted(set(int(c) for c in self.cells))))

    @classmethod
    def from_sorted(cls, grid: GridSpec, cells: tuple, cellset: frozenset | None = None):
        """Skip normalisation for a tuple of distinct ints already in order."""
        obj = object.__new__(cls)
        object.__setattr__(obj, "grid", grid)
        object.__setattr__(obj, "cells", cells)
        if cellset is not None:
            obj.__dict__["cellset"] = cellset
        return obj

    @cached_property
    def cellset(self) -> frozenset:
        return frozenset(self.cells)

    @cached_property
    def _decoded(self):
        return [self.grid.decode(c) for c in self.cells]

    def eval(self, x):
        c = self.grid.cell_of(x)
        return any(self.grid.adjacent(c, u) for u in self._decoded)

    def size(self):
        return 1 + len(self.cells) * self.grid.id_width

    def select(self, ctx, idx=None):
        gi = ctx.grid_index(self.grid)
        near = gi.near_mask(self.cellset)
        if idx is None:
            return gi.points_in(near)
        return idx[near[gi.pt_pos[idx]]]

    def to_json(self):
        return {"kind": self.kind, "grid": self.grid.to_json(), "cells": list(self.cells)}


@dataclass(frozen=True, eq=False, repr=False)
class PseudoRandomMember(Predicate):
    spec: object  # prg.PseudoRandomSubsetSpec
    kind = "PseudoRandomMember"
    randomised = True
    cost = 10

    def element(self, x) -> int:
        if self.spec.key is None:
            return point_index(x, self.spec.side)
        return self.spec.key.value(x) - 1

    def eval(self, x):
        w = self.spec.inclusion.weight.value(x) if self.spec.inclusion.weight is not None else 1
        return self.spec.member_scalar(self.element(x), w)

    def size(self):
        key = self.spec.key.size() if self.spec.key is not None else 0
        return 1 + self.spec.inclusion.size() + key + self.spec.charge

    def select(self, ctx, idx=None):
        return ctx.backend.prm_select(self, ctx, _all(ctx, idx))

    def to_json(self):
        inc = self.spec.inclusion
        out = {"kind": self.kind, "seed": self.spec.seed, "k": self.spec.bits_per_element,
               "universe": self.spec.universe, "scale": str(inc.scale)}
        if inc.weight is not None:
            out["weight"] = inc.weight.expr.to_json()
        if self.spec.key is not None:
            out["key"] = self.spec.key.expr.to_json()
        return out


class _Composite(Predicate):
    children: tuple

    @cached_property
    def _size(self):
        return 1 + sum(c.size() for c in self.children)

    def size(self):
        return self._size

    @cached_property
    def randomised(self):
        return any(c.randomised for c in self.children)

    @cached_property
    def cost(self):
        return max([c.cost for c in self.children] + [0]) + 1

    @cached_property
    def _ordered(self):
        return sorted(self.children, key=lambda c: c.cost)

    def to_json(self):
        return {"kind": self.kind, "children": [c.to_json() for c in self.children]}


@dataclass(frozen=True, eq=False, repr=False)
class And(_Composite):
    children: tuple
    kind = "And"

    def __post_init__(self):
        object.__setattr__(self, "children", tuple(self.children))

    def eval(self, x):
        return all(c.eval(x) for c in self.children)

    def select(self, ctx, idx=None):
        if idx is None and not self.randomised:
            return ctx.cached_select(self, self._select)
        return self._select(ctx, idx)

    def _select(self, ctx, idx):
        for c in self._ordered:
            idx = c.select(ctx, idx)
            if len(idx) == 0:
                break
        return _all(ctx, idx)


@dataclass(frozen=True, eq=False, repr=False)
class Or(_Composite):
    children: tuple
    kind = "Or"

    def __post_init__(self):
        object.__setattr__(self, "children", tuple(self.children))

    def eval(self, x):
        return any(c.eval(x) for c in self.children)

    def select(self, ctx, idx=None):
        rest = _all(ctx, idx)
        found = []
        for c in self._ordered:
            if len(rest) == 0:
                break
            got = c.select(ctx, rest)
            found.append(got)
            rest = _drop_sorted(rest, got)
        if not found:
            return np.zeros(0, dtype=np.int64)
        return np.sort(np.concatenate(found))


@dataclass(frozen=True, eq=False, repr=False)
class Not(Predicate):
    child: Predicate
    kind = "Not"

    @property
    def randomised(self):
        return self.child.randomised

    @property
    def cost(self):
        return self.child.cost + 1

    def eval(self, x):
        return not self.child.eval(x)

    def size(self):
        return 1 + self.child.size()

    def select(self, ctx, idx=None):
        cand = _all(ctx, idx)
        return _drop_sorted(cand, self.child.select(ctx, idx))

    def to_json(self):
        return {"kind": self.kind, "child": self.child.to_json()}


def conjoin(a: Predicate, b: Predicate) -> Predicate:
    return And((a, b))


def evaluate(pred: Predicate, x) -> bool:
    return pred.eval(x)


def size(pred: Predicate) -> int:
    return pred.size()


def to_json(pred: Predicate) -> str:
    return json.dumps(pred.to_json())


def nearest_center_predicate(centers: Sequence[Sequence[int]], j: int) -> Predicate:
    """Points whose closest center is centers[j]; ties go to the lower index."""
    pj = [int(c) for c in centers[j]]
    parts = []
    for i, pi in enumerate(centers):
        if i == j:
            continue
        pi = [int(c) for c in pi]
        coeffs = [2 * (a - b) for a, b in zip(pi, pj)]
        rhs = sum(a * a for a in pi) - sum(b * b for b in pj)
        parts.append(HalfSpace(coeffs, "<=" if i > j else "<", rhs))
    if not parts:
        return TRUE
    return parts[0] if len(parts) == 1 else And(tuple(parts))


# ================================================================ context

class _LRU:
    def __init__(self, max_bytes: int):
        self.max_bytes = max_bytes
        self.bytes = 0
        self.data: OrderedDict = OrderedDict()

    def get(self, key):
        got = self.data.get(key)
        if got is not None:
            self.data.move_to_end(key)
        return got

    def put(self, key, arr):
        self.data[key] = arr
        self.bytes += arr.nbytes
        while self.bytes > self.max_bytes and len(self.data) > 1:
            _, old = self.data.popitem(last=False)
            self.bytes -= old.nbytes


class EvalContext:
    """Vectorised evaluation state for one dataset.

    Holds caches of deterministic node masks and weight values keyed by node
    identity, per-grid occupied-cell indexes, and the randomness backend used
    for pseudorandom nodes.
    """

    def __init__(self, dataset, backend=None, use_kdtree: bool = False, cache_bytes: int = 1 << 28):
        from .oracle import NisanBackend

        self.dataset = dataset
        self.side = dataset.side
        self.n = dataset.n
        # Points are held in increasing domain-index order so pseudorandom
        # evaluation walks the generator's blocks monotonically.  ``order``
        # maps internal positions back to dataset indices.
        self._elem = None
        if dataset.domain_size < 2**63:
            elem = point_indices(dataset.coords, dataset.side)
            order = np.argsort(elem, kind="stable")
            self._elem = elem[order]
        else:
            order = np.arange(dataset.n, dtype=np.int64)
        self.order = order
        self.rank = np.empty_like(order)
        self.rank[order] = np.arange(dataset.n, dtype=np.int64)
        self.coords = dataset.coords[order]
        self.backend = backend if backend is not None else NisanBackend()
        self.use_kdtree = use_kdtree
        self._masks = _LRU(cache_bytes // 2)
        self._values = _LRU(cache_bytes // 2)
        self._grids: OrderedDict = OrderedDict()
        self._kdtree = None

    @property
    def point_elements(self) -> np.ndarray:
        if self._elem is None:
            self._elem = point_indices(self.coords, self.side)
        return self._elem

    def cached_mask(self, node: Predicate) -> np.ndarray:
        m = self._masks.get(node)
        if m is None:
            m = node._mask(self, None)
            self._masks.put(node, m)
        return m

    def cached_values(self, expr: WeightExpr) -> np.ndarray:
        v = self._values.get(expr)
        if v is None:
            v = expr._compute(self, None)
            self._values.put(expr, v)
        return v

    def cached_select(self, node: Predicate, compute) -> np.ndarray:
        got = self._masks.get(("sel", node))
        if got is None:
            got = compute(self, None)
            self._masks.put(("sel", node), got)
        return got

    def grid_index(self, grid: GridSpec) -> GridIndex:
        gi = self._grids.get(grid)
        if gi is None:
            gi = GridIndex(grid, self.coords)
            self._grids[grid] = gi
            while len(self._grids) > 8:
                self._grids.popitem(last=False)
        else:
            self._grids.move_to_end(grid)
        return gi

    def ball_query(self, center, threshold: int, op: str) -> np.ndarray:
        from scipy.spatial import cKDTree

        if self._kdtree is None:
            self._kdtree = cKDTree(self.coords)
        cand = np.asarray(self._kdtree.query_ball_point(np.asarray(center, float), math.sqrt(max(threshold, 0)) + 0.5),
                          dtype=np.int64)
        if cand.size == 0:
            return cand
        cand.sort()
        diff = self.coords[cand] - np.asarray(center, dtype=np.int64)
        d2 = np.einsum("ij,ij->i", diff, diff)
        return cand[OPS[op](d2, threshold)]
