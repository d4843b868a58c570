"""Brute-force ground truth for every estimated quantity.

Nothing here imports the oracle, the primitives or the estimators, so a bug
in those cannot cancel out in a comparison.  Grid cells are recomputed from
the raw fixed-point grid fields rather than through the grid helpers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .domain import Dataset, UsageError
from .predicate import SHIFT_BITS, TRUE, GridSpec, Predicate, WeightFn

GUARD_N = 50_000
KMEANS_GUARD_N = 10_000


def _guard(ds: Dataset, limit: int = GUARD_N):
    if ds.n > limit:
        raise UsageError(f"reference scan refused: n={ds.n} exceeds guard {limit}")


class UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))
        self.rank = [0] * n
        self.components = n

    def find(self, a: int) -> int:
        root = a
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[a] != root:
            self.parent[a], a = root, self.parent[a]
        return root

    def union(self, a: int, b: int) -> bool:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        if self.rank[ra] < self.rank[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        if self.rank[ra] == self.rank[rb]:
            self.rank[ra] += 1
        self.components -= 1
        return True

    def sizes(self) -> dict:
        out: dict = {}
        for i in range(len(self.parent)):
            r = self.find(i)
            out[r] = out.get(r, 0) + 1
        return out


# ================================================================ set queries

def exact_match_indices(ds: Dataset, pred: Predicate = TRUE) -> list[int]:
    _guard(ds)
    return [j for j, p in enumerate(ds.points) if pred.eval(p)]


def exact_set_size(ds: Dataset, pred: Predicate = TRUE) -> int:
    return len(exact_match_indices(ds, pred))


def exact_distinct(ds: Dataset, f: WeightFn, pred: Predicate = TRUE) -> int:
    _guard(ds)
    return len({f.value(p) for p in ds.points if pred.eval(p)})


def exact_distinct_sorted(ds: Dataset, f: WeightFn, pred: Predicate = TRUE) -> int:
    """Second implementation: sort the values and count runs."""
    vals = sorted(f.value(p) for p in ds.points if pred.eval(p))
    return sum(1 for i, v in enumerate(vals) if i == 0 or v != vals[i - 1])


def exact_max(ds: Dataset, f: WeightFn, pred: Predicate = TRUE):
    _guard(ds)
    vals = [f.value(p) for p in ds.points if pred.eval(p)]
    return max(vals) if vals else None


def exact_sum(ds: Dataset, f: WeightFn, pred: Predicate = TRUE) -> int:
    _guard(ds)
    return sum(f.value(p) for p in ds.points if pred.eval(p))


def exact_value_classes(ds: Dataset, f: WeightFn, pred: Predicate = TRUE) -> dict:
    """value -> list of point indices holding it."""
    out: dict = {}
    for j, p in enumerate(ds.points):
        if pred.eval(p):
            out.setdefault(f.value(p), []).append(j)
    return out


# ================================================================ k-means

def exact_kmeans_cost(ds: Dataset, centers) -> float:
    c = np.asarray([tuple(p) for p in centers], dtype=np.int64)
    best = None
    for row in c:
        d2 = ((ds.coords - row) ** 2).sum(1)
        best = d2 if best is None else np.minimum(best, d2)
    return float(best.sum())


def exact_voronoi_counts(ds: Dataset, centers) -> list[int]:
    """Points per center, ties to the lowest index."""
    c = np.asarray([tuple(p) for p in centers], dtype=np.int64)
    d2 = ((ds.coords[:, None, :] - c[None, :, :]) ** 2).sum(-1)
    lab = d2.argmin(1)  # argmin returns the first minimiser
    return np.bincount(lab, minlength=len(c)).tolist()


def exact_kmeans_baseline(ds: Dataset, k: int, restarts: int = 50, seed: int = 0) -> tuple[float, np.ndarray]:
    """Best-of-``restarts`` Lloyd with k-means++ seeding: (cost, centers)."""
    from sklearn.cluster import KMeans

    _guard(ds, KMEANS_GUARD_N)
    km = KMeans(n_clusters=k, init="k-means++", n_init=restarts, random_state=seed)
    km.fit(ds.coords.astype(float))
    return float(km.inertia_), km.cluster_centers_


# ================================================================ MST

def exact_mst_weight(ds: Dataset) -> float:
    """Dense O(n^2) Prim."""
    _guard(ds)
    if ds.n < 2:
        raise UsageError("MST needs at least two points")
    X = ds.coords.astype(float)
    n = ds.n
    in_tree = np.zeros(n, dtype=bool)
    dist = np.full(n, np.inf)
    dist[0] = 0.0
    total = 0.0
    for _ in range(n):
        cand = np.where(in_tree, np.inf, dist)
        u = int(cand.argmin())
        total += math.sqrt(cand[u]) if cand[u] > 0 else 0.0
        in_tree[u] = True
        d2 = ((X - X[u]) ** 2).sum(1)
        np.minimum(dist, d2, out=dist)
    return total


def kruskal_mst_weight(ds: Dataset, limit: int = 3000) -> float:
    """Kruskal over all pairs with exact integer squared lengths."""
    if ds.n > limit:
        raise UsageError("Kruskal reference limited to small inputs")
    pts = ds.coords.tolist()
    edges = []
    for i in range(len(pts)):
        for j in range(i + 1, len(pts)):
            edges.append((sum((a - b) ** 2 for a, b in zip(pts[i], pts[j])), i, j))
    edges.sort()
    uf = UnionFind(len(pts))
    total = 0.0
    for w, i, j in edges:
        if uf.union(i, j):
            total += math.sqrt(w)
            if uf.components == 1:
                break
    return total


def exact_point_components(ds: Dataset, radius: float) -> int:
    """Components of the graph joining points at distance <= radius."""
    _guard(ds)
    uf = UnionFind(ds.n)
    tree = cKDTree(ds.coords.astype(float))
    r2 = radius * radius
    for i, j in tree.query_pairs(radius + 1e-9):
        d2 = int(((ds.coords[i] - ds.coords[j]) ** 2).sum())
        if d2 <= r2:
            uf.union(i, j)
    return uf.components


@dataclass
class CellComponents:
    cells: np.ndarray        # (S, d) integer cell coordinates
    labels: np.ndarray       # component label per cell
    sizes: np.ndarray        # cells per component, indexed by label

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @property
    def n_components(self) -> int:
        return len(self.sizes)

    def size_of_cell(self, cell) -> int:
        hit = np.flatnonzero((self.cells == np.asarray(cell)).all(1))
        if len(hit) == 0:
            raise UsageError("cell not occupied")
        return int(self.sizes[self.labels[hit[0]]])


def occupied_cells(ds: Dataset, grid: GridSpec) -> np.ndarray:
    """Distinct cells floor((x - v) / R) in fixed point, recomputed directly."""
    scaled = ds.coords.astype(object) * (1 << SHIFT_BITS) - np.array(grid.shift_scaled, dtype=object)
    cells = np.array(scaled // grid.side_scaled, dtype=np.int64)
    return np.unique(cells, axis=0)


def exact_cell_components(ds: Dataset, grid: GridSpec) -> CellComponents:
    """Union-find over occupied cells; cells are adjacent when the squared
    norm of their index difference is at most grid.adj_sq."""
    _guard(ds)
    cells = occupied_cells(ds, grid)
    uf = UnionFind(len(cells))
    if len(cells) > 1:
        tree = cKDTree(cells.astype(float))
        for i, j in tree.query_pairs(math.sqrt(grid.adj_sq) + 1e-6):
            if int(((cells[i] - cells[j]) ** 2).sum()) <= grid.adj_sq:
                uf.union(i, j)
    roots = np.array([uf.find(i) for i in range(len(cells))])
    _, labels, sizes = np.unique(roots, return_inverse=True, return_counts=True)
    return CellComponents(cells, labels.reshape(-1), sizes)
