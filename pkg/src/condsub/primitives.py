"""Algorithmic building blocks over the COND oracle.

Point-in-set and listing, support estimation (SE), distinct values (DV),
maximum (binary search and randomised), sum over level sets, weighted
conditional sampling (WCOND) and distinct-element sampling (DES).

All hidden constants live in ``Budgets``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import NamedTuple

import numpy as np

from .domain import ParameterError, Point, UsageError, as_fraction, ceil_log2
from .oracle import CondOracle
from .predicate import And, ClampToRange, HashOf, Not, NotEqualPoint, Predicate, WeightCompare, WeightFn
from .prg import Inclusion, make_hash_spec, pseudo_subset_predicate


@dataclass(frozen=True)
class Budgets:
    """Explicit constants behind every O(.) query budget."""

    # support estimation / distinct values
    se_list_cap: int = 2
    se_coarse_coeff: float = 1.0      # reps per coarse step: ceil(c * ln(2 * steps / delta))
    # fine queries: ceil(c * ln(2 / delta) / eps^2). A query at mean lam = p s is a
    # Bernoulli observation with Fisher information I = lam^2 / (e^lam - 1) about log s,
    # so a Gaussian tail on the MLE needs c = 2 / I, about 3.09 at lam = 1.6.
    se_fine_coeff: float = 3.1
    se_fine_density: float = 1.6      # expected matches per fine query (maximises information)
    se_pilot_share: float = 0.25      # share of fine queries spent before re-centring
    # max
    max_random_reps: float = 2.0      # ceil(c * ln(2 * log2(n) / delta)) per halving step
    max_random_cap: float = 1.0       # hard stop after c * log2(n) * reps steps
    # sum
    sum_se_share: Fraction = Fraction(1)      # part of eps given to the counts
    sum_pilot_eps: Fraction = Fraction(1)
    sum_tail_share: Fraction = Fraction(1, 4)  # eps share allowed for truncated low levels
    # weighted sampling
    wcond_rounds_coeff: float = 6.0   # ceil(c * ln(1 / delta)) rejection rounds
    wcond_sum_eps: Fraction = Fraction(1)
    # distinct-element sampling
    des_retry_coeff: float = 2.0      # ceil(c * log2(1 / delta)) attempts


DEFAULT_BUDGETS = Budgets()


@dataclass
class EstimateResult:
    value: float
    eps: Fraction
    delta: Fraction
    queries: int = 0
    description_cost: int = 0
    details: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.value < 0:
            raise ValueError("estimates are non-negative")

    def __float__(self):
        return float(self.value)


class Listing(NamedTuple):
    points: list
    overflow: bool


def _rng(rng) -> np.random.Generator:
    if rng is None:
        return np.random.default_rng()
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def _seed(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2**63))


class _Meter:
    def __init__(self, oracle: CondOracle):
        self.oracle = oracle
        self.q0 = oracle.query_count
        self.c0 = oracle.total_description_size

    def result(self, value, eps, delta, **details) -> EstimateResult:
        return EstimateResult(value, Fraction(eps), Fraction(delta),
                              self.oracle.query_count - self.q0,
                              self.oracle.total_description_size - self.c0, details)


def _check_eps_delta(eps, delta):
    eps, delta = as_fraction(eps), as_fraction(delta)
    if not 0 < eps <= 1:
        raise ParameterError(f"eps must lie in (0, 1], got {eps}")
    if not 0 < delta < 1:
        raise ParameterError(f"delta must lie in (0, 1), got {delta}")
    return eps, delta


def _support(C: Predicate, f: WeightFn) -> Predicate:
    return And((C, WeightCompare(f, ">", 0))) if f.allow_zero else C


# ================================================================ EP / listing

def ep(oracle: CondOracle, C: Predicate, label: str = "ep"):
    """Some point of the set, or None."""
    hit = oracle.cond(C, label)
    return None if hit is None else hit[1]


def list_all(oracle: CondOracle, C: Predicate, cap: int, label: str = "list") -> Listing:
    """Up to ``cap`` distinct points of the set, excluding found points each time.

    ``overflow`` is set when the set holds more than ``cap`` points; this costs
    one extra query.
    """
    if cap < 1:
        raise UsageError("cap must be >= 1")
    found: list[Point] = []
    excl: list[Predicate] = []
    while True:
        pred = C if not excl else And((C, *excl))
        p = ep(oracle, pred, label)
        if p is None:
            return Listing(found, False)
        if len(found) == cap:
            return Listing(found, True)
        found.append(p)
        excl.append(NotEqualPoint(p))


def _list_values(oracle, C, f, cap, label):
    vals: list[int] = []
    excl: list[Predicate] = []
    while True:
        pred = C if not excl else And((C, *excl))
        p = ep(oracle, pred, label)
        if p is None:
            return vals, False
        if len(vals) == cap:
            return vals, True
        v = f.value(p)
        vals.append(v)
        excl.append(Not(WeightCompare(f, "==", v)))


# ================================================================ SE / DV

def _mle_count(obs_p: np.ndarray, obs_empty: np.ndarray, lo: float, hi: float) -> float:
    """Maximum-likelihood s for P(empty | p) = (1 - p)^s on [lo, hi]."""
    ps, inv = np.unique(obs_p, return_inverse=True)
    n_emp = np.bincount(inv, weights=obs_empty.astype(float), minlength=len(ps))
    n_all = np.bincount(inv, minlength=len(ps)).astype(float)
    a = -np.log1p(-ps)

    def score(s):
        q = np.exp(-a * s)
        return float(np.sum((n_all - n_emp) * a * q / -np.expm1(-a * s)) - np.sum(n_emp * a))

    if score(hi) >= 0:
        return hi
    if score(lo) <= 0:
        return lo
    x0, x1 = math.log(lo), math.log(hi)
    for _ in range(80):
        mid = 0.5 * (x0 + x1)
        if score(math.exp(mid)) > 0:
            x0 = mid
        else:
            x1 = mid
    return math.exp(0.5 * (x0 + x1))


def _count(oracle: CondOracle, C: Predicate, key: WeightFn | None, eps, delta, rng, b: Budgets, label):
    eps, delta = _check_eps_delta(eps, delta)
    rng = _rng(rng)
    meter = _Meter(oracle)
    with oracle.scope(label):
        if key is None:
            small, overflow = list_all(oracle, C, b.se_list_cap, "list")
            small = len(small)
            universe = oracle.domain_size
            upper = oracle.n
        else:
            C = _support(C, key)
            vals, overflow = _list_values(oracle, C, key, b.se_list_cap, "list")
            small = len(vals)
            universe = key.bound
            upper = min(oracle.n, key.bound)
        if not overflow:
            return meter.result(small, eps, delta, exact=True)
        lo_count = b.se_list_cap + 1

        J = max(1, ceil_log2(upper))
        coarse_steps = max(1, ceil_log2(J) + 1)
        coarse_reps = math.ceil(b.se_coarse_coeff * math.log(2 * coarse_steps / float(delta)))
        fine_total = math.ceil(b.se_fine_coeff * math.log(2 / float(delta)) / float(eps) ** 2)
        n_queries = coarse_steps * coarse_reps + fine_total
        prg_delta = max(delta / (2 * n_queries), Fraction(1, universe))
        prg_delta = min(prg_delta, Fraction(1, 2))

        obs_p: list[float] = []
        obs_e: list[bool] = []

        def probe(p: Fraction, reps: int, tag: str) -> int:
            empties = 0
            inc = Inclusion(p)
            pexact = None
            for _ in range(reps):
                R = pseudo_subset_predicate(inc, prg_delta, _seed(rng), dim=oracle.dim, side=oracle.side, key=key)
                if pexact is None:
                    k = R.spec.bits_per_element
                    pexact = inc.threshold(k) / 2.0**k
                e = oracle.cond(And((C, R)), tag) is None
                empties += e
                obs_p.append(pexact)
                obs_e.append(e)
            return empties

        # coarse binary search on alpha = 2^j for the crossing s ~ alpha
        lo, hi = 1, J
        while hi - lo > 1:
            mid = (lo + hi) // 2
            emp = probe(Fraction(1, 2**mid), coarse_reps, "coarse")
            if emp > coarse_reps / math.e:
                hi = mid
            else:
                lo = mid
        centre = 2.0 ** (0.5 * (lo + hi))

        def density(s_hat):
            p = min(0.5, b.se_fine_density / max(s_hat, 1.0))
            return Fraction(max(1, round(p * 2**40)), 2**40)

        pilot = max(1, int(fine_total * b.se_pilot_share))
        probe(density(centre), pilot, "fine")
        s_pilot = _mle_count(np.array(obs_p), np.array(obs_e), lo_count, float(upper))
        probe(density(s_pilot), fine_total - pilot, "fine")
        est = _mle_count(np.array(obs_p), np.array(obs_e), lo_count, float(upper))
    return meter.result(est, eps, delta, exact=False, coarse_bracket=(2**lo, 2**hi), pilot=s_pilot)


def support_estimation(oracle: CondOracle, C: Predicate, eps, delta, rng=None,
                       budgets: Budgets = DEFAULT_BUDGETS, label: str = "se") -> EstimateResult:
    """(eps, delta)-estimate of |X intersect C|; exact for sets of size <= 2."""
    return _count(oracle, C, None, eps, delta, rng, budgets, label)


def distinct_values(oracle: CondOracle, C: Predicate, f: WeightFn, eps, delta, rng=None,
                    budgets: Budgets = DEFAULT_BUDGETS, label: str = "dv") -> EstimateResult:
    """(eps, delta)-estimate of the number of distinct values of f on the set.

    Random subsets live on the value range [1, M] and are composed with f.
    """
    return _count(oracle, C, f, eps, delta, rng, budgets, label)


# ================================================================ max

def argmax_binary(oracle: CondOracle, C: Predicate, f: WeightFn, label: str = "max_binary"):
    """(max f, a maximising point) by binary search on the threshold."""
    hit = oracle.cond(C, label)
    if hit is None:
        return None
    best = hit[1]
    lo, hi = f.value(best), f.bound
    while lo < hi:
        mid = (lo + hi + 1) // 2
        hit = oracle.cond(And((C, WeightCompare(f, ">=", mid))), label)
        if hit is None:
            hi = mid - 1
        else:
            best = hit[1]
            if f.value(best) < mid:
                raise RuntimeError("oracle answer violates its predicate")
            lo = f.value(best)
    return lo, best


def max_binary(oracle: CondOracle, C: Predicate, f: WeightFn, label: str = "max_binary"):
    """Exact maximum of f on the set (None if empty), <= ceil(log2 M) + 1 queries."""
    got = argmax_binary(oracle, C, f, label)
    return None if got is None else got[0]


def max_random_budget(n: int, delta, b: Budgets = DEFAULT_BUDGETS) -> int:
    lg = max(1.0, math.log2(max(n, 2)))
    reps = math.ceil(b.max_random_reps * math.log(2 * lg / float(delta)))
    return math.ceil(b.max_random_cap * lg * reps)


def argmax_random(oracle: CondOracle, C: Predicate, f: WeightFn, delta, budgets: Budgets = DEFAULT_BUDGETS,
                  label: str = "max_random"):
    """(max, argmax point, fell_back) by repeatedly asking for a better point."""
    hit = oracle.cond(C, label)
    if hit is None:
        return None
    best = hit[1]
    m = f.value(best)
    cap = max_random_budget(oracle.n, delta, budgets)
    for _ in range(cap):
        hit = oracle.cond(And((C, WeightCompare(f, ">", m))), label)
        if hit is None:
            return m, best, False
        best = hit[1]
        m = f.value(best)
    got = argmax_binary(oracle, And((C, WeightCompare(f, ">=", m))), f, label + "/fallback")
    return got[0], got[1], True


def max_random(oracle: CondOracle, C: Predicate, f: WeightFn, delta, budgets: Budgets = DEFAULT_BUDGETS,
               label: str = "max_random", return_info: bool = False):
    """Maximum via COND(C and f > m) improvements; falls back to binary search
    after the hard step cap."""
    got = argmax_random(oracle, C, f, delta, budgets, label)
    if got is None:
        return (None, False) if return_info else None
    return (got[0], got[2]) if return_info else got[0]


# ================================================================ sum

def sum_weights(oracle: CondOracle, C: Predicate, f: WeightFn, eps, delta, rng=None,
                budgets: Budgets = DEFAULT_BUDGETS, label: str = "sum") -> EstimateResult:
    """(eps, delta)-estimate of sum of f over the set via geometric level sets.

    Level i holds f in (Max (1+eps)^-i, Max (1+eps)^(1-i)] and is valued at
    the midpoint of its integer range.  Every level gets a coarse count, top
    down until the levels left could hold only a small share of the total;
    levels are then recounted with accuracy eps_i ~ sqrt(W / w_i) so that the
    weighted errors add up to the target accuracy.
    """
    eps, delta = _check_eps_delta(eps, delta)
    rng = _rng(rng)
    meter = _Meter(oracle)
    b = budgets
    with oracle.scope(label):
        Cf = _support(C, f)
        mx = max_binary(oracle, Cf, f, "max")
        if mx is None:
            return meter.result(0, eps, delta, max=0, levels=[])
        base = 1 + eps
        n_levels = max(1, math.ceil(math.log(oracle.n / float(eps)) / math.log(float(base))) + 1)
        d_level = delta / (2 * n_levels + 1)
        # Levels are taken top-down.  Once n * hi_i falls below a small share
        # of the running total, every remaining level together is negligible.
        tail_share = float(eps) * float(b.sum_tail_share)
        levels = []
        total = 0.0
        hi_prev = mx
        scale = Fraction(mx)
        for i in range(1, n_levels + 1):
            scale /= base
            lo_i = scale.numerator // scale.denominator
            hi_i = hi_prev
            hi_prev = lo_i
            if hi_i < 1 or oracle.n * hi_i <= tail_share * total / 2:
                break
            if lo_i >= hi_i:
                continue
            pred = And((Cf, WeightCompare(f, ">", lo_i), WeightCompare(f, "<=", hi_i)))
            r = support_estimation(oracle, pred, b.sum_pilot_eps, d_level, rng, b, "pilot")
            lv = {"i": i, "lo": lo_i, "hi": hi_i, "pred": pred, "mid": (lo_i + 1 + hi_i) / 2,
                  "count": float(r.value), "exact": r.details.get("exact", False)}
            levels.append(lv)
            total += lv["count"] * lv["mid"]
        if not levels:
            return meter.result(0, eps, delta, max=mx, levels=[])
        eps_se = eps * b.sum_se_share
        for lv in levels:
            w = lv["count"] * lv["mid"]
            if lv["exact"] or w <= 0:
                continue
            eps_i = float(eps_se) * math.sqrt(total / w)
            if eps_i < float(b.sum_pilot_eps):
                eps_i = Fraction(eps_i).limit_denominator(10**6)
                r = support_estimation(oracle, lv["pred"], eps_i, d_level, rng, b, "refine")
                lv["count"] = float(r.value)
        value = sum(lv["count"] * lv["mid"] for lv in levels)
    summary = [(lv["lo"], lv["hi"], lv["count"]) for lv in levels]
    return meter.result(value, eps, delta, max=mx, levels=summary)


# ================================================================ weighted sampling

def wcond(oracle: CondOracle, C: Predicate, f: WeightFn, eps_tv, delta, rng=None, total=None,
          budgets: Budgets = DEFAULT_BUDGETS, label: str = "wcond"):
    """A point drawn with probability ~ f(x) / sum f, or None on failure.

    Each round builds a pseudorandom H containing x with probability
    f(x) / (2 S), S >= max f an estimate of the sum; when exactly one point of
    the set lands in H it is returned with probability 1 - f(x) / (2 S).
    ``total`` supplies S and skips the internal sum estimate.
    """
    eps_tv, delta = as_fraction(eps_tv), as_fraction(delta)
    if not 0 < delta < 1 or eps_tv <= 0:
        raise ParameterError("need eps_tv > 0 and delta in (0, 1)")
    rng = _rng(rng)
    b = budgets
    with oracle.scope(label):
        Cf = _support(C, f)
        mx = None
        if total is None:
            est = sum_weights(oracle, Cf, f, b.wcond_sum_eps, delta / 2, rng, b, "sum")
            mx = est.details["max"]
            if mx == 0:
                return None
            total = max(est.value, mx)
        S = max(1, math.ceil(total))
        g = f
        if f.bound > 2 * S:
            # f agrees on the set with its clamp to the observed maximum
            if mx is None:
                mx = max_binary(oracle, Cf, f, "max")
                if mx is None:
                    return None
            S = max(S, mx)
            g = WeightFn(ClampToRange(f.expr, 0 if f.allow_zero else 1, mx), mx, f.side, allow_zero=f.allow_zero)
        inc = Inclusion(Fraction(1, 2 * S), g)
        log_inv = max(1.0, math.log(1 / float(delta)))
        prg_delta = max(Fraction(eps_tv) / (oracle.domain_size * Fraction(log_inv).limit_denominator(1000)),
                        Fraction(1, oracle.domain_size))
        prg_delta = min(prg_delta, Fraction(1, 2))
        rounds = math.ceil(b.wcond_rounds_coeff * log_inv)
        for _ in range(rounds):
            H = pseudo_subset_predicate(inc, prg_delta, _seed(rng), dim=oracle.dim, side=oracle.side)
            hit = oracle.cond(And((Cf, H)), "probe")
            if hit is None:
                continue
            x = hit[1]
            if oracle.cond(And((Cf, H, NotEqualPoint(x))), "unique") is not None:
                continue
            if int(rng.integers(2 * S)) >= g.value(x):
                return x
    return None


# ================================================================ distinct-element sampling

def des(oracle: CondOracle, C: Predicate, f: WeightFn, eps_tv, delta, rng=None,
        budgets: Budgets = DEFAULT_BUDGETS, label: str = "des"):
    """A point whose value class f^-1(y) is ~uniform over the classes present.

    Returns the argmax of a pseudorandom hash h(f(x)); attempts where another
    class shares the maximal hash value are discarded and retried.
    """
    eps_tv, delta = as_fraction(eps_tv), as_fraction(delta)
    if not 0 < delta < 1 or eps_tv <= 0:
        raise ParameterError("need eps_tv > 0 and delta in (0, 1)")
    rng = _rng(rng)
    Cf = _support(C, f)
    bits = min(62, ceil_log2(f.bound) + ceil_log2(1 / eps_tv) + 1)
    tries = max(1, math.ceil(budgets.des_retry_coeff * math.log2(1 / float(delta))))
    with oracle.scope(label):
        for _ in range(tries):
            spec = make_hash_spec(f, bits, _seed(rng), delta=min(eps_tv, Fraction(1, 2)))
            hf = WeightFn(HashOf(spec), 2**bits, f.side)
            got = argmax_random(oracle, Cf, hf, delta, budgets, "argmax")
            if got is None:
                return None
            v, x, _ = got
            clash = And((Cf, WeightCompare(hf, "==", v), Not(WeightCompare(f, "==", f.value(x)))))
            if oracle.cond(clash, "collision") is None:
                return x
    return None
