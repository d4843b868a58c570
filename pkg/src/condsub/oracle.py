"""The conditional sampling oracle COND(C) with query metering.

Pseudorandom predicate nodes are evaluated by a backend:

* ``NisanBackend`` evaluates the Nisan generator exactly (the model's
  semantics: the set is a deterministic function of the seed);
* ``IdealBackend`` replaces each pseudorandom set by a truly random one,
  sampled lazily and memoised per node so repeated use stays consistent.
  It is a simulation shortcut for large experiments.
"""

from __future__ import annotations

import contextlib
import json
import weakref
from dataclasses import dataclass

import numpy as np

from .domain import Dataset, Point
from .predicate import TRUE, And, EvalContext, HashOf, Predicate, PseudoRandomMember


# ================================================================ backends

def _thresholds_top(spec, ctx, idx, kk):
    """Top kk bits of floor(g(x) * 2^k) per point (or one shared value)."""
    inc = spec.inclusion
    num, den = inc.scale.numerator, inc.scale.denominator
    if inc.weight is None:
        return np.array([(num << kk) // den], dtype=np.int64)
    w = inc.weight.values(ctx, idx)
    if int(w.max(initial=0)) * num < (1 << (62 - kk)):
        return (w * num << kk) // den
    t = (w.astype(object) * (num << kk)) // den
    return t.astype(np.int64)


def _elements(spec, ctx, idx):
    if spec.key is None:
        return ctx.point_elements[idx]
    return spec.key.values(ctx, idx) - 1


class NisanBackend:
    name = "nisan"

    def prm_select(self, node: PseudoRandomMember, ctx, idx: np.ndarray) -> np.ndarray:
        if len(idx) == 0:
            return idx
        spec = node.spec
        k = spec.bits_per_element
        kk = min(k, 62)
        elems = _elements(spec, ctx, idx)
        codes = spec.kernel_codes(elems, _thresholds_top(spec, ctx, idx, kk))
        member = codes == 1
        ties = np.flatnonzero(codes == 2)
        for t in ties:
            w = spec.inclusion.weight.value(ctx.coords[idx[t]]) if spec.inclusion.weight is not None else 1
            member[t] = spec.member_scalar(int(elems[t]), w)
        return idx[member]

    def hash_values(self, node: HashOf, ctx, idx) -> np.ndarray:
        spec = node.spec
        elems = spec.key.values(ctx, idx) - 1
        return spec.kernel_values(elems)


class _Memo:
    """Decided memberships (or hash values) of elements of one random object."""

    __slots__ = ("elems", "vals", "lazy")

    def __init__(self):
        self.elems = np.zeros(0, dtype=np.int64)
        self.vals = np.zeros(0, dtype=np.int64)
        self.lazy = None

    def lookup(self, uniq):
        if len(self.elems) == 0:
            return np.zeros(len(uniq), dtype=bool), None
        pos = np.minimum(np.searchsorted(self.elems, uniq), len(self.elems) - 1)
        hit = self.elems[pos] == uniq
        return hit, pos

    def add(self, elems, vals):
        if len(elems) == 0:
            return
        e = np.concatenate([self.elems, elems])
        v = np.concatenate([self.vals, vals])
        order = np.argsort(e, kind="stable")
        self.elems, self.vals = e[order], v[order]


class IdealBackend:
    name = "ideal"

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        # keyed weakly: a random set is forgotten with its predicate node
        self.memo = weakref.WeakKeyDictionary()

    def is_fresh(self, node) -> bool:
        return node not in self.memo

    def _memo(self, node) -> _Memo:
        m = self.memo.get(node)
        if m is None:
            m = self.memo[node] = _Memo()
        if m.lazy is not None:
            self._materialise(node, m)
        return m

    def _materialise(self, node, m: _Memo):
        uniq, chosen = m.lazy
        m.lazy = None
        vals = np.zeros(len(uniq), dtype=np.int64)
        vals[chosen] = 1
        m.add(uniq, vals)

    def prm_select(self, node: PseudoRandomMember, ctx, idx: np.ndarray) -> np.ndarray:
        if len(idx) == 0:
            return idx
        spec = node.spec
        elems = _elements(spec, ctx, idx)
        uniq, first, inv = np.unique(elems, return_index=True, return_inverse=True)
        inv = inv.reshape(-1)
        m = self._memo(node)
        hit, pos = m.lookup(uniq)
        member = np.zeros(len(uniq), dtype=bool)
        if pos is not None:
            member[hit] = m.vals[pos[hit]] == 1
        new = np.flatnonzero(~hit)
        if len(new):
            inc = spec.inclusion
            if inc.weight is None:
                p = np.full(len(new), float(inc.scale))
            else:
                w = inc.weight.values(ctx, idx[first[new]])
                p = w * float(inc.scale)
            draw = self.rng.random(len(new)) < p
            member[new] = draw
            m.add(uniq[new], draw.astype(np.int64))
        return idx[member[inv]]

    def record_lazy(self, node, uniq: np.ndarray, chosen: np.ndarray):
        m = self.memo.get(node)
        if m is None:
            m = self.memo[node] = _Memo()
        m.lazy = (uniq, chosen)

    def hash_values(self, node: HashOf, ctx, idx) -> np.ndarray:
        # a hash is an explicit function that callers also evaluate pointwise,
        # so it is never replaced by fresh randomness
        spec = node.spec
        return spec.kernel_values(spec.key.values(ctx, idx) - 1)


def _sample_distinct(rng: np.random.Generator, u: int, K: int) -> np.ndarray:
    """K distinct values from range(u), uniformly (Floyd for small K)."""
    if K * 16 > u:
        return rng.choice(u, size=K, replace=False)
    chosen: set[int] = set()
    for j in range(u - K, u):
        t = int(rng.integers(j + 1))
        chosen.add(j if t in chosen else t)
    return np.fromiter(chosen, dtype=np.int64, count=K)


# ================================================================ ledger

@dataclass(frozen=True)
class LedgerEntry:
    label: str
    queries: int
    description_cost: int


class QueryLedger:
    """Snapshots of the oracle counters; counters only ever grow."""

    def __init__(self):
        self.snapshots: list[LedgerEntry] = []

    def record(self, label: str, queries: int, cost: int):
        if self.snapshots and (queries < self.snapshots[-1].queries or cost < self.snapshots[-1].description_cost):
            raise AssertionError("ledger counters decreased")
        self.snapshots.append(LedgerEntry(label, queries, cost))

    def to_json(self) -> str:
        return json.dumps([e.__dict__ for e in self.snapshots])


# ================================================================ oracle

class CondOracle:
    """COND over a dataset: uniform index among points satisfying C, or None.

    ``backend`` is "nisan" (exact pseudorandom sets) or "ideal".  With
    ``check=True`` every answer is re-verified with scalar evaluation.
    Indices are 0-based.
    """

    def __init__(self, dataset: Dataset, seed: int = 0, backend: str = "nisan",
                 check: bool = False, use_kdtree: bool = False, fast_paths: bool = True):
        self.dataset = dataset
        self.seed = int(seed)
        ss = np.random.SeedSequence(self.seed)
        k_answer, k_sets = ss.spawn(2)
        self.rng = np.random.Generator(np.random.Philox(k_answer))
        if backend == "nisan":
            be = NisanBackend()
        elif backend == "ideal":
            be = IdealBackend(np.random.Generator(np.random.Philox(k_sets)))
        else:
            raise ValueError(f"unknown backend {backend!r}")
        self.backend_name = backend
        self.ctx = EvalContext(dataset, be, use_kdtree=use_kdtree)
        self.check = check
        self.fast_paths = fast_paths
        self.query_count = 0
        self.total_description_size = 0
        self.by_label: dict[str, list[int]] = {}
        self.ledger = QueryLedger()
        self._prefix: list[str] = []
        self._group_cache: dict = {}

    # -- properties
    @property
    def n(self) -> int:
        return self.dataset.n

    @property
    def dim(self) -> int:
        return self.dataset.dim

    @property
    def side(self) -> int:
        return self.dataset.side

    @property
    def domain_size(self) -> int:
        return self.dataset.domain_size

    # -- metering
    @contextlib.contextmanager
    def scope(self, name: str):
        self._prefix.append(name)
        try:
            yield self
        finally:
            self._prefix.pop()

    def _meter(self, pred: Predicate, label: str):
        cost = pred.size()
        self.query_count += 1
        self.total_description_size += cost
        full = "/".join(self._prefix + [label]) if self._prefix else label
        slot = self.by_label.setdefault(full, [0, 0])
        slot[0] += 1
        slot[1] += cost

    def snapshot(self, label: str) -> LedgerEntry:
        self.ledger.record(label, self.query_count, self.total_description_size)
        return self.ledger.snapshots[-1]

    def attribution_json(self) -> str:
        return json.dumps([{"label": k, "queries": v[0], "description_cost": v[1]}
                           for k, v in sorted(self.by_label.items())])

    # -- queries
    def cond(self, pred: Predicate, label: str = "cond"):
        """One COND query: (index, Point) uniform over matches, or None."""
        self._meter(pred, label)
        hit = None
        if self.fast_paths and self.backend_name == "ideal" and isinstance(pred, And):
            hit = self._fresh_set_query(pred)
        if hit is None:
            idx = pred.select(self.ctx, None)
            if len(idx) == 0:
                return None
            i = int(idx[self.rng.integers(len(idx))])
        elif hit == -1:
            return None
        else:
            i = hit
        orig = int(self.ctx.order[i])
        p = self.dataset[orig]
        if self.check:
            if self.backend_name == "ideal" and pred.randomised:
                ok = len(pred.select(self.ctx, np.array([i], dtype=np.int64))) == 1
            else:
                ok = pred.eval(p)
            if not ok:
                raise AssertionError(f"oracle returned point {p} failing the predicate")
        return orig, p

    def sub(self, label: str = "sub"):
        return self.cond(TRUE, label)

    def exact_match_set(self, pred: Predicate) -> list[int]:
        """All indices j with C(x_j) true, by scalar scan (no metering)."""
        return [j for j, p in enumerate(self.dataset.points) if pred.eval(p)]

    # -- ideal-backend shortcut
    def _fresh_set_query(self, pred: And):
        """COND(C and R) for a fresh truly random R of constant density.

        Returns a point index, -1 for empty, or None when not applicable.
        Draws K ~ Bin(u, p) members among the u distinct elements of C,
        then picks the answer with probability proportional to class size;
        the chosen K elements are kept so R stays consistent if reused.
        """
        be = self.ctx.backend
        prms = [c for c in pred.children if isinstance(c, PseudoRandomMember)]
        if len(prms) != 1:
            return None
        node = prms[0]
        rest = tuple(c for c in pred.children if c is not node)
        if node.spec.inclusion.weight is not None or not be.is_fresh(node):
            return None
        if any(c.randomised for c in rest):
            return None
        base = And(rest).select(self.ctx, None) if rest else np.arange(self.n, dtype=np.int64)
        if len(base) == 0:
            return -1
        key = node.spec.key
        if key is None:
            uniq = self.ctx.point_elements[base]
            counts = None
        else:
            uniq, counts, order, starts = self._groups(rest, key, base)
        u = len(uniq)
        p = float(node.spec.inclusion.scale)
        K = int(be.rng.binomial(u, p)) if p < 1 else u
        if K == 0:
            be.record_lazy(node, uniq, np.zeros(0, dtype=np.int64))
            return -1
        chosen = _sample_distinct(be.rng, u, K)
        if counts is None:
            j = int(chosen[self.rng.integers(K)])
            be.record_lazy(node, uniq, chosen)
            return int(base[j])
        w = counts[chosen].astype(float)
        c = int(chosen[np.searchsorted(np.cumsum(w), self.rng.random() * w.sum(), side="right").clip(0, K - 1)])
        members = order[starts[c]:starts[c + 1]]
        ans = int(base[members[self.rng.integers(len(members))]])
        be.record_lazy(node, uniq, chosen)
        return ans

    def _groups(self, rest, key, base):
        ck = (rest, key.expr)
        got = self._group_cache.get(ck)
        if got is None:
            vals = key.values(self.ctx, base) - 1
            uniq, inv, counts = np.unique(vals, return_inverse=True, return_counts=True)
            inv = inv.reshape(-1)
            order = np.argsort(inv, kind="stable")
            starts = np.concatenate([[0], np.cumsum(counts)])
            got = (uniq, counts, order, starts)
            if len(self._group_cache) > 16:
                self._group_cache.clear()
            self._group_cache[ck] = got
        return got
