"""Constant-factor k-means through the COND oracle.

Three steps: D^2-sample about beta*k candidate centers with weighted
conditional sampling, weight each candidate by its (estimated) Voronoi
count, then solve weighted k-means on the small weighted set.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from .domain import Params, Point, UsageError, as_fraction
from .oracle import CondOracle
from .predicate import (TRUE, Const, Predicate, SqDistTo, WeightCompare, WeightFn,
                        nearest_center_predicate, tournament_min)
from .primitives import DEFAULT_BUDGETS, Budgets, sum_weights, wcond


@dataclass
class CenterSet:
    centers: list
    weights: list

    def __post_init__(self):
        if len(self.centers) != len(self.weights):
            raise UsageError("one weight per center")
        if any(w <= 0 for w in self.weights):
            raise UsageError("center weights must be positive")

    def __len__(self):
        return len(self.centers)

    def array(self) -> np.ndarray:
        return np.asarray([tuple(c) for c in self.centers], dtype=np.int64)


@dataclass
class Clustering:
    centers: list
    cost: float
    details: dict = field(default_factory=dict)


def d2_weight(centers: Sequence[Sequence[int]], dim: int, side: int) -> WeightFn:
    """f(x) = min over centers of d^2(x, p), as a balanced Min tree."""
    expr = tournament_min([SqDistTo(tuple(int(v) for v in p)) for p in centers])
    return WeightFn(expr, max(1, dim * (side - 1) ** 2), side, allow_zero=True)


# ================================================================ step 1

def d2_sample_centers(oracle: CondOracle, k: int, beta: float = 8, eps_tv=Fraction(1, 10), delta=Fraction(1, 10),
                      rng=None, budgets: Budgets = DEFAULT_BUDGETS, label: str = "d2") -> CenterSet:
    """ceil(beta * k) centers: the first uniform, each next one D^2-sampled.

    Stops early once every input point is a center (all weights zero).
    """
    if k < 1:
        raise UsageError("k must be >= 1")
    if oracle.n < k:
        raise UsageError(f"need n >= k, got n={oracle.n}, k={k}")
    rng = np.random.default_rng(rng)
    m = max(1, math.ceil(beta * k))
    delta = as_fraction(delta)
    d_call = delta / (2 * m)
    centers: list[Point] = []
    with oracle.scope(label):
        centers.append(oracle.sub("first")[1])
        while len(centers) < m:
            f = d2_weight(centers, oracle.dim, oracle.side)
            x = wcond(oracle, TRUE, f, eps_tv, d_call, rng, budgets=budgets, label="wcond")
            if x is None:
                # either no mass left or a failed draw; one query tells them apart
                if oracle.cond(WeightCompare(f, ">", 0), "mass") is None:
                    break
                continue
            centers.append(x)
    return CenterSet(centers, [1] * len(centers))


# ================================================================ step 2

def voronoi_weights(oracle: CondOracle, P: CenterSet, eps2=Fraction(1, 4), delta=Fraction(1, 10), rng=None,
                    budgets: Budgets = DEFAULT_BUDGETS, label: str = "voronoi") -> CenterSet:
    """Weight each center by an estimate of the number of points it attracts.

    Cells break ties toward the lower center index, so they partition X.
    """
    if len(P) == 0:
        raise UsageError("empty center set")
    rng = np.random.default_rng(rng)
    one = WeightFn(Const(1), 1, oracle.side)
    d_cell = as_fraction(delta) / len(P)
    weights = []
    with oracle.scope(label):
        for j in range(len(P)):
            cell = nearest_center_predicate(P.centers, j)
            est = sum_weights(oracle, cell, one, eps2, d_cell, rng, budgets, "cell")
            # every center is an input point of its own cell, so the weight is >= 1
            weights.append(max(1.0, float(est.value)))
    return CenterSet(list(P.centers), weights)


# ================================================================ step 3

def weighted_cost(points: np.ndarray, weights: np.ndarray, centers: np.ndarray) -> float:
    d2 = ((points[:, None, :].astype(float) - centers[None, :, :]) ** 2).sum(-1)
    return float((weights * d2.min(1)).sum())


def _stirling2(n: int, k: int) -> int:
    row = [1] + [0] * k
    for i in range(1, n + 1):
        new = [0] * (k + 1)
        for j in range(1, min(i, k) + 1):
            new[j] = j * row[j] + row[j - 1]
        row = new
    return row[k]


def exhaustive_weighted_kmeans(points: np.ndarray, weights: np.ndarray, k: int) -> tuple[float, np.ndarray]:
    """Optimal weighted k-means by enumerating every partition into k groups.

    Group cost is sum w|x|^2 - |sum w x|^2 / sum w, kept incrementally.
    """
    pts = np.asarray(points, dtype=float)
    w = np.asarray(weights, dtype=float)
    n = len(pts)
    if n < k:
        raise UsageError("need at least k points")
    sq = (pts**2).sum(1)
    W = [0.0] * k
    S = [np.zeros(pts.shape[1]) for _ in range(k)]
    Q = [0.0] * k
    assign = [0] * n
    best = [math.inf, None]

    def cost(g):
        return Q[g] - float(S[g] @ S[g]) / W[g] if W[g] > 0 else 0.0

    def rec(i, used, partial):
        if partial >= best[0]:
            return
        if n - i < k - used:
            return
        if i == n:
            best[0], best[1] = partial, list(assign)
            return
        for g in range(min(used + 1, k)):
            before = cost(g)
            W[g] += w[i]
            S[g] = S[g] + w[i] * pts[i]
            Q[g] += w[i] * sq[i]
            assign[i] = g
            rec(i + 1, max(used, g + 1), partial - before + cost(g))
            W[g] -= w[i]
            S[g] = S[g] - w[i] * pts[i]
            Q[g] -= w[i] * sq[i]

    rec(0, 0, 0.0)
    lab = np.asarray(best[1])
    centers = np.array([(w[lab == g, None] * pts[lab == g]).sum(0) / w[lab == g].sum() for g in range(k)])
    return best[0], centers


EXHAUSTIVE_LIMIT = 200_000  # partitions


def _merge_duplicates(points: np.ndarray, weights: np.ndarray):
    uniq, inv = np.unique(points, axis=0, return_inverse=True)
    return uniq, np.bincount(inv.reshape(-1), weights=weights)


def solve_weighted(P: CenterSet, k: int, rng=None, restarts: int = 10) -> Clustering:
    """k centers for the weighted set P.

    Weighted k-means++ seeding plus weighted Lloyd, best of ``restarts``;
    small inputs are solved exactly by partition enumeration.  Centers are
    rounded to the integer grid.  Fewer than k points are returned as-is and
    flagged.
    """
    from sklearn.cluster import KMeans

    pts, w = _merge_duplicates(P.array(), np.asarray(P.weights, dtype=float))
    if len(pts) <= k:
        cost = 0.0
        return Clustering([Point(p) for p in pts.tolist()], cost,
                          {"padded": len(pts) < k, "solver": "identity"})
    if _stirling2(len(pts), k) <= EXHAUSTIVE_LIMIT:
        _, cen = exhaustive_weighted_kmeans(pts, w, k)
        solver = "exhaustive"
    else:
        seed = int(np.random.default_rng(rng).integers(2**31))
        km = KMeans(n_clusters=k, init="k-means++", n_init=restarts, random_state=seed)
        km.fit(pts.astype(float), sample_weight=w)
        cen = km.cluster_centers_
        solver = "lloyd"
    cen = np.rint(cen).astype(np.int64)
    cen = np.maximum(cen, 1)
    return Clustering([Point(c) for c in cen.tolist()], weighted_cost(pts, w, cen), {"padded": False, "solver": solver})


# ================================================================ pipeline

def kmeans_pipeline(oracle: CondOracle, k: int, params: Params, beta: float = 8, eps2=Fraction(1, 4),
                    budgets: Budgets = DEFAULT_BUDGETS, estimate_cost: bool = True):
    """Run the three steps; returns (Clustering, report dict).

    The reported cost is a Sum estimate of d^2 to the final centers.
    """
    rng = np.random.default_rng(params.seed)
    t0 = time.perf_counter()
    delta = params.delta
    steps = 3 if estimate_cost else 2
    d_step = delta / steps
    q0 = oracle.query_count
    P = d2_sample_centers(oracle, k, beta, params.eps, d_step, rng, budgets)
    oracle.snapshot("d2")
    P = voronoi_weights(oracle, P, eps2, d_step, rng, budgets)
    oracle.snapshot("voronoi")
    sol = solve_weighted(P, k, rng)
    sol.centers = [Point(min(int(v), oracle.side) for v in c) for c in sol.centers]
    est = None
    if estimate_cost:
        f = d2_weight(sol.centers, oracle.dim, oracle.side)
        r = sum_weights(oracle, TRUE, f, params.eps, d_step, rng, budgets, "cost")
        est = float(r.value)
        oracle.snapshot("cost")
    report = {
        "candidates": len(P),
        "weights": [float(w) for w in P.weights],
        "weighted_cost": sol.cost,
        "solver": sol.details.get("solver"),
        "estimated_cost": est,
        "queries": oracle.query_count - q0,
        "ledger": [(e.label, e.queries, e.description_cost) for e in oracle.ledger.snapshots],
        "wall_ms": (time.perf_counter() - t0) * 1e3,
    }
    return Clustering(sol.centers, est if est is not None else sol.cost, report), report
