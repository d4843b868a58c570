import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chisquare

from condsub import reference as ref
from condsub.domain import Dataset, ParameterError, UsageError
from condsub.oracle import CondOracle
from condsub.predicate import (FALSE, TRUE, Add, Const, Coord, CoordCompare, FloorDiv, HalfSpace, SqDistCompare,
                               SqDistTo, WeightFn, weight_fn)
from condsub.primitives import (DEFAULT_BUDGETS, Budgets, des, distinct_values, ep, list_all, max_binary, max_random,
                                max_random_budget, sum_weights, support_estimation, wcond)

from conftest import uniform_dataset

E, D = Fraction(1, 10), Fraction(1, 20)


def oracle(ds, seed=0, backend="nisan"):
    return CondOracle(ds, seed=seed, backend=backend)


def halfspace(ds, rng):
    a = rng.integers(-100, 101, size=ds.dim)
    c = rng.integers(1, ds.side + 1, size=ds.dim)
    return HalfSpace(a.tolist(), "<=", int(a @ c))


# ---------------------------------------------------------------- ep / list

def test_ep():
    ds = uniform_dataset(200, seed=1)
    o = oracle(ds)
    assert ep(o, FALSE) is None
    single = Dataset([[5, 6]])
    assert ep(oracle(single), TRUE) == (5, 6)
    ball = SqDistCompare((500, 500), "<=", 200**2)
    members = {ds[j] for j in o.exact_match_set(ball)}
    for _ in range(20):
        assert ep(o, ball) in members


def test_list_all():
    ds = Dataset([[1, 1], [2, 5], [7, 3], [8, 8], [4, 4]])
    o = oracle(ds)
    assert list_all(o, FALSE, 10) == ([], False)
    three = CoordCompare(0, "<=", 4)
    got = list_all(o, three, 10)
    assert sorted(got.points) == sorted(p for p in ds.points if p[0] <= 4) and not got.overflow
    got = list_all(o, TRUE, 2)
    assert len(got.points) == 2 and len(set(got.points)) == 2 and got.overflow
    with pytest.raises(UsageError):
        list_all(o, TRUE, 0)


# ---------------------------------------------------------------- support estimation

def test_se_small_cases_exact():
    ds = uniform_dataset(500, seed=2)
    o = oracle(ds)
    assert support_estimation(o, FALSE, E, D).value == 0
    for k in (1, 2):
        pred = CoordCompare(0, "<=", int(np.sort(ds.coords[:, 0])[k - 1]))
        if ref.exact_set_size(ds, pred) == k:
            assert support_estimation(o, pred, E, D).value == k


def test_se_parameter_checks():
    o = oracle(uniform_dataset(10))
    for eps, delta in [(0, D), (Fraction(3, 2), D), (E, 0), (E, 1)]:
        with pytest.raises(ParameterError):
            support_estimation(o, TRUE, eps, delta)


@pytest.mark.parametrize("backend", ["nisan", "ideal"])
def test_se_accuracy(backend):
    ds = uniform_dataset(3000, seed=3)
    rng = np.random.default_rng(0)
    fails = 0
    for s in range(12):
        C = halfspace(ds, rng)
        exact = ref.exact_set_size(ds, C)
        est = support_estimation(oracle(ds, s, backend), C, E, D, rng).value
        fails += abs(est - exact) > 0.1 * exact
    assert fails <= 2


def test_se_queries_independent_of_n():
    q = []
    for n in (1000, 8000):
        ds = uniform_dataset(n, seed=4)
        o = oracle(ds, backend="ideal")
        support_estimation(o, TRUE, E, D, np.random.default_rng(1))
        q.append(o.query_count)
    assert q[1] <= 1.5 * q[0]


# ---------------------------------------------------------------- distinct values

def test_dv_constant_and_injective():
    ds = uniform_dataset(2000, seed=5)
    o = oracle(ds, backend="ideal")
    rng = np.random.default_rng(2)
    assert distinct_values(o, TRUE, weight_fn(Const(3), ds.side), E, D, rng).value == 1
    # coordinate-index key is injective on distinct points of [1, side]^2
    f = weight_fn(Add((Coord(0), FloorDiv(Coord(1), 1, 0))), ds.side)
    inj = weight_fn(Add((Coord(0), Const(0))), ds.side)
    C = CoordCompare(1, "==", int(ds.coords[0, 1]))
    n_c = ref.exact_set_size(ds, C)
    got = distinct_values(o, C, inj, E, D, rng).value
    assert abs(got - n_c) <= max(1, 0.1 * n_c)


def test_dv_floor_buckets():
    ds = uniform_dataset(4000, side=2048, seed=6)
    f = weight_fn(FloorDiv(Coord(0), 10), ds.side)
    exact = ref.exact_distinct(ds, f)
    assert exact == ref.exact_distinct_sorted(ds, f)
    fails = 0
    for s in range(10):
        est = distinct_values(oracle(ds, s, "ideal"), TRUE, f, E, D, np.random.default_rng(s)).value
        fails += abs(est - exact) > 0.1 * exact
    assert fails <= 1


# ---------------------------------------------------------------- max

def test_max_binary_examples():
    ds = uniform_dataset(300, seed=7)
    o = oracle(ds)
    assert max_binary(o, FALSE, weight_fn(Const(5), ds.side)) is None
    assert max_binary(o, TRUE, weight_fn(Const(5), ds.side)) == 5


def test_max_binary_query_bound():
    rng = np.random.default_rng(8)
    for s in range(30):
        ds = uniform_dataset(1000, seed=100 + s)
        f = weight_fn(Add((SqDistTo(tuple(int(v) for v in rng.integers(1, 1001, 2))), Const(1))), ds.side)
        o = oracle(ds, s)
        got = max_binary(o, TRUE, f)
        assert got == ref.exact_max(ds, f)
        assert o.query_count <= math.ceil(math.log2(f.bound)) + 2


def test_max_random_examples():
    assert max_random(oracle(Dataset([[4, 4]])), TRUE, weight_fn(SqDistTo((1, 1)), 8, allow_zero=True), D) == 18
    ds = uniform_dataset(100, seed=9)
    o = oracle(ds)
    assert max_random(o, TRUE, weight_fn(Const(7), ds.side), D) == 7
    assert o.query_count == 2


def test_max_random_sorted_weights():
    n = 2048
    ds = Dataset([[i] for i in range(1, n + 1)], side=n)
    f = weight_fn(Coord(0), n)
    budget = max_random_budget(n, Fraction(1, 10)) + 1 + math.ceil(math.log2(n)) + 2
    wrong = 0
    for s in range(100):
        o = oracle(ds, s, "ideal")
        got = max_random(o, TRUE, f, Fraction(1, 10))
        wrong += got != n
        assert o.query_count <= budget
    assert wrong <= 1


# ---------------------------------------------------------------- sum

def test_sum_empty_and_constant():
    ds = uniform_dataset(3000, seed=10)
    o = oracle(ds, backend="ideal")
    one = WeightFn(Const(1), 1, ds.side)
    assert sum_weights(o, FALSE, one, E, D).value == 0
    rng = np.random.default_rng(3)
    s = sum_weights(o, TRUE, one, E, D, rng).value
    se = support_estimation(o, TRUE, E, D, rng).value
    assert abs(s - ds.n) <= 0.1 * ds.n and abs(s - se) <= 0.2 * ds.n


def test_sum_squared_distance():
    ds = uniform_dataset(4000, seed=11)
    f = weight_fn(Add((SqDistTo((300, 700)), Const(1))), ds.side)
    exact = ref.exact_sum(ds, f)
    fails = 0
    for s in range(10):
        est = sum_weights(oracle(ds, s, "ideal"), TRUE, f, E, D, np.random.default_rng(s)).value
        fails += abs(est - exact) > 0.1 * exact
    assert fails <= 1


@settings(max_examples=10)
@given(st.lists(st.integers(1, 2000), min_size=1, max_size=40, unique=True), st.integers(0, 2**32))
def test_sum_small_sets_close(xs, seed):
    ds = Dataset([[x] for x in xs], side=2048)
    f = weight_fn(Coord(0), 2048)
    est = sum_weights(oracle(ds, seed, "ideal"), TRUE, f, Fraction(1, 4), Fraction(1, 20),
                      np.random.default_rng(seed)).value
    assert abs(est - sum(xs)) <= 0.5 * sum(xs)


# ---------------------------------------------------------------- wcond

def test_wcond_singleton():
    ds = Dataset([[3, 3]])
    o = oracle(ds)
    f = weight_fn(Coord(0), ds.side)
    # a round keeps x with prob 1/2 and accepts it with prob 1/2, so a call
    # returns None with prob (3/4)^rounds
    rounds = math.ceil(DEFAULT_BUDGETS.wcond_rounds_coeff * max(1.0, math.log(1 / float(D))))
    got = [wcond(o, TRUE, f, Fraction(1, 10), D, total=3) for _ in range(200)]
    assert set(got) <= {(3, 3), None}
    assert got.count(None) <= 200 * 0.75**rounds + 3 * math.sqrt(200 * 0.75**rounds) + 1


def test_wcond_two_points():
    ds = Dataset([[1], [3]], side=4)
    f = weight_fn(Coord(0), 4)
    o = oracle(ds, 1, "ideal")
    rng = np.random.default_rng(4)
    draws = [wcond(o, TRUE, f, Fraction(1, 20), D, rng, total=4) for _ in range(10_000)]
    got = [x for x in draws if x is not None]
    share = sum(1 for x in got if x == (3,)) / len(got)
    assert abs(share - 0.75) <= 0.02


def test_wcond_constant_is_uniform():
    ds = uniform_dataset(12, seed=12)
    f = weight_fn(Const(4), ds.side)
    o = oracle(ds, 2, "ideal")
    rng = np.random.default_rng(5)
    counts = np.zeros(ds.n)
    pos = {p: j for j, p in enumerate(ds.points)}
    misses = 0
    for _ in range(6000):
        x = wcond(o, TRUE, f, Fraction(1, 20), D, rng, total=4 * ds.n)
        if x is None:
            misses += 1
        else:
            counts[pos[x]] += 1
    assert chisquare(counts).pvalue > 1e-3
    assert misses / 6000 <= D


def test_wcond_estimates_total_itself():
    ds = Dataset([[1], [2], [3], [4]], side=4)
    f = weight_fn(Coord(0), 4)
    o = oracle(ds, 3, "ideal")
    x = wcond(o, TRUE, f, Fraction(1, 10), D, np.random.default_rng(6))
    assert x in ds.points


# ---------------------------------------------------------------- des

def test_des_injective_uniform():
    ds = uniform_dataset(10, seed=13)
    f = weight_fn(Add((Coord(0), Const(0))), ds.side)
    if ref.exact_distinct(ds, f) != ds.n:
        pytest.skip("first coordinates collide for this seed")
    o = oracle(ds, 4, "ideal")
    rng = np.random.default_rng(7)
    pos = {p: j for j, p in enumerate(ds.points)}
    counts = np.zeros(ds.n)
    for _ in range(4000):
        counts[pos[des(o, TRUE, f, Fraction(1, 100), D, rng)]] += 1
    assert chisquare(counts).pvalue > 1e-3


def test_des_constant():
    ds = uniform_dataset(30, seed=14)
    o = oracle(ds)
    f = weight_fn(Const(2), ds.side)
    for _ in range(10):
        assert des(o, TRUE, f, Fraction(1, 10), D) in ds.points


def test_des_two_classes():
    ds = Dataset([[1], [2], [3], [9]], side=16)
    f = weight_fn(FloorDiv(Coord(0), 8), 16)          # classes {1,2,3} and {9}
    o = oracle(ds, 5, "ideal")
    rng = np.random.default_rng(8)
    big = sum(des(o, TRUE, f, Fraction(1, 50), D, rng)[0] < 8 for _ in range(10_000))
    assert abs(big / 10_000 - 0.5) <= 0.02


def test_budgets_are_explicit():
    b = Budgets()
    assert b.se_list_cap == 2 and b.wcond_rounds_coeff > 0
