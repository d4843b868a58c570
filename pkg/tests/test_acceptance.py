"""Acceptance criteria, each at its stated tolerance.

Every test prints one line ``A<k> PASS|FAIL ...`` to the terminal.  Most of
them are long (the MST and k-means checks run 100 seeds each); select a
single criterion with ``pytest tests/test_acceptance.py -k a8``.
"""

import json
import math
import time
from fractions import Fraction

import numpy as np
import pytest

from condsub import reference as ref
from condsub.domain import Dataset, Params
from condsub.harness import ExperimentSpec, generate_dataset, run
from condsub.kmeans import kmeans_pipeline
from condsub.mst import choose_shift, estimate_component, estimate_mst_weight
from condsub.oracle import CondOracle
from condsub.predicate import TRUE, Add, Const, Coord, FloorDiv, GridSpec, HalfSpace, SqDistTo, WeightFn, weight_fn
from condsub.prg import Automaton, NisanGenerator, distinguisher_gap
from condsub.primitives import des, max_binary, max_random, sum_weights, support_estimation, wcond

pytestmark = pytest.mark.acceptance


@pytest.fixture
def report(capsys):
    def emit(tag, ok, detail):
        with capsys.disabled():
            print(f"\n{tag} {'PASS' if ok else 'FAIL'} {detail}", flush=True)
        return ok
    return emit


def uniform(n, seed, side=1000, d=2):
    return generate_dataset("uniform", {"n": n, "side": side, "d": d}, seed)


def random_halfspace(ds, rng):
    a = rng.integers(-100, 101, size=ds.dim)
    while not a.any():
        a = rng.integers(-100, 101, size=ds.dim)
    c = rng.integers(1, ds.side + 1, size=ds.dim)
    return HalfSpace(a.tolist(), "<=", int(a @ c))


def tv(counts, target):
    return 0.5 * float(np.abs(counts / counts.sum() - target).sum())


# ---------------------------------------------------------------- 1

def test_a1_support_estimation(report):
    eps, delta = Fraction(1, 10), Fraction(1, 20)
    fails, queries = 0, []
    t0 = time.perf_counter()
    for s in range(100):
        rng = np.random.default_rng(s)
        ds = uniform(10_000, s)
        C = random_halfspace(ds, rng)
        exact = ref.exact_set_size(ds, C)
        o = CondOracle(ds, seed=s)
        est = support_estimation(o, C, eps, delta, rng).value
        fails += abs(est - exact) > 0.1 * exact
        queries.append(o.query_count)
    secs = time.perf_counter() - t0
    med = float(np.median(queries))
    ok = fails <= 10 and med <= 5000 and secs < 120
    assert report("A1", ok, f"failure_rate={fails / 100:.2f} (<=0.10) median_queries={med:.0f} (<=5000) "
                  f"runtime={secs:.1f}s (<120s)")


# ---------------------------------------------------------------- 2

def test_a2_max(report):
    exact_hits, over_budget = 0, 0
    for s in range(100):
        rng = np.random.default_rng(s)
        ds = uniform(1000, 1000 + s)
        c = tuple(int(v) for v in rng.integers(1, ds.side + 1, size=2))
        f = weight_fn(Add((SqDistTo(c), Const(1))), ds.side)
        o = CondOracle(ds, seed=s)
        got = max_binary(o, TRUE, f)
        exact_hits += got == ref.exact_max(ds, f)
        over_budget += o.query_count > math.ceil(math.log2(f.bound)) + 2
    delta = Fraction(1, 10)
    wrong = 0
    for s in range(300):
        rng = np.random.default_rng(10_000 + s)
        ds = uniform(1000, 2000 + s % 30)
        c = tuple(int(v) for v in rng.integers(1, ds.side + 1, size=2))
        f = weight_fn(Add((SqDistTo(c), Const(1))), ds.side)
        wrong += max_random(CondOracle(ds, seed=s), TRUE, f, delta) != ref.exact_max(ds, f)
    ok = exact_hits == 100 and over_budget == 0 and wrong / 300 <= float(delta) + 0.05
    assert report("A2", ok, f"max_binary exact={exact_hits}/100 over_budget={over_budget} "
                  f"max_random failure_rate={wrong / 300:.3f} (<={float(delta) + 0.05:.2f})")


# ---------------------------------------------------------------- 3

def test_a3_sum(report):
    eps, delta = Fraction(1, 10), Fraction(1, 20)
    center = (500, 500)
    fails, errs = 0, []
    for s in range(100):
        ds = uniform(10_000, s)
        f = WeightFn(SqDistTo(center), 2 * 999**2, ds.side, allow_zero=True)
        exact = ref.exact_sum(ds, f)
        est = sum_weights(CondOracle(ds, seed=s), TRUE, f, eps, delta, np.random.default_rng(s)).value
        errs.append(abs(est - exact) / exact)
        fails += errs[-1] > 0.1
    assert report("A3", fails <= 10, f"failure_rate={fails / 100:.2f} (<=0.10) p95_rel_error="
                  f"{np.percentile(errs, 95):.3f}")


# ---------------------------------------------------------------- 4

def test_a4_wcond(report):
    ds = Dataset([[i, 1] for i in range(1, 17)], side=16)
    f = weight_fn(Coord(0), ds.side)
    delta = Fraction(1, 20)
    o = CondOracle(ds, seed=4)
    rng = np.random.default_rng(4)
    total = sum_weights(o, TRUE, f, Fraction(1, 2), delta, rng).value
    counts = np.zeros(16)
    draws = misses = 0
    while counts.sum() < 20_000:
        x = wcond(o, TRUE, f, Fraction(1, 100), delta, rng, total=total)
        draws += 1
        if x is None:
            misses += 1
        else:
            counts[x[0] - 1] += 1
    dist = tv(counts, np.arange(1, 17) / 136)
    ok = dist <= 0.03 and misses / draws <= float(delta)
    assert report("A4", ok, f"tv={dist:.4f} (<=0.03) no_output_rate={misses / draws:.4f} (<=0.05)")


# ---------------------------------------------------------------- 5

def test_a5_des(report):
    sizes = [1, 2, 5, 9, 17, 40, 80, 150]
    pts = [[256 * j + i + 1] for j, m in enumerate(sizes) for i in range(m)]
    ds = Dataset(pts, side=2048)
    f = weight_fn(FloorDiv(Coord(0), 256), ds.side)
    assert ref.exact_distinct(ds, f) == 8
    o = CondOracle(ds, seed=5)
    rng = np.random.default_rng(5)
    counts = np.zeros(8)
    for _ in range(20_000):
        counts[f.value(des(o, TRUE, f, Fraction(1, 100), Fraction(1, 20), rng)) - 1] += 1
    dist = tv(counts, np.full(8, 1 / 8))
    assert report("A5", dist <= 0.03, f"tv={dist:.4f} (<=0.03) class_sizes={sizes}")


# ---------------------------------------------------------------- 6

def test_a6_nisan(report):
    rng = np.random.default_rng(6)
    worst = {}
    ok = True
    for S, N in [(2, 8), (2, 16), (3, 9), (3, 16)]:
        gaps = []
        for _ in range(20):
            q = 2**S
            aut = Automaton(rng.integers(0, q, size=(q, 2)), rng.random(q) < 0.5, int(rng.integers(q)))
            gaps.append(distinguisher_gap(S, N, aut))
        worst[(S, N)] = float(max(gaps))
        ok &= max(gaps) <= Fraction(1, 2**S)
    det = True
    for seed in range(5):
        a, b = NisanGenerator(16, 16 * 4096, seed=seed), NisanGenerator(16, 16 * 4096, seed=seed)
        idx = np.arange(4096)
        det &= a.blocks(idx).tolist() == b.blocks(idx).tolist() == [a.block(int(k)) for k in idx]
    detail = " ".join(f"S={S},N={N}:{g:.4f}" for (S, N), g in worst.items())
    assert report("A6", ok and det, f"max_gap {detail} (<=2^-S) block_determinism={det}")


# ---------------------------------------------------------------- 7

CLUSTERS = {"k": 4, "sigma": 1000, "side": 100_000, "separation": 20_000}


def test_a7_kmeans(report):
    good, ratios = 0, []
    for s in range(100):
        ds = generate_dataset("clustered", {"n": 10_000, **CLUSTERS}, s)
        o = CondOracle(ds, seed=s)
        sol, _ = kmeans_pipeline(o, 4, Params(Fraction(1, 10), Fraction(1, 10), s))
        base, _ = ref.exact_kmeans_baseline(ds, 4, restarts=50, seed=s)
        ratios.append(ref.exact_kmeans_cost(ds, sol.centers) / base)
        good += ratios[-1] <= 20
    ledger = {}
    for n in (1000, 1_000_000):
        q = []
        for s in range(3):
            ds = generate_dataset("clustered", {"n": n, **CLUSTERS}, 500 + s)
            o = CondOracle(ds, seed=s, backend="ideal")
            kmeans_pipeline(o, 4, Params(Fraction(1, 10), Fraction(1, 10), s))
            q.append(o.query_count)
        ledger[n] = float(np.mean(q))
    growth = ledger[1_000_000] / ledger[1000]
    ok = good >= 90 and growth <= 8
    assert report("A7", ok, f"ratio<=20 in {good}/100 (>=90) median_ratio={np.median(ratios):.3f} "
                  f"ledger n=1e6/n=1e3={growth:.2f} (<=8)")


# ---------------------------------------------------------------- 8

def _mst_runs(n, d, tol, seeds):
    good, ratios = 0, []
    for s in range(seeds):
        ds = uniform(n, s, d=d)
        exact = ref.exact_mst_weight(ds)
        r = estimate_mst_weight(CondOracle(ds, seed=s), Fraction(1, 5), Fraction(1, 10), np.random.default_rng(s))
        ratios.append(r.value / exact)
        good += abs(ratios[-1] - 1) <= tol
    return good, ratios


def test_a8_mst_d2(report):
    good, ratios = _mst_runs(10_000, 2, 0.25, 100)
    assert report("A8[d=2]", good >= 90, f"within 1+-0.25 in {good}/100 (>=90) "
                  f"ratio range [{min(ratios):.3f}, {max(ratios):.3f}]")


def test_a8_mst_d3(report):
    good, ratios = _mst_runs(1000, 3, 0.3, 100)
    assert report("A8[d=3]", good >= 85, f"within 1+-0.3 in {good}/100 (>=85) "
                  f"ratio range [{min(ratios):.3f}, {max(ratios):.3f}]")


def test_a8_bfs_matches_union_find(report):
    agree = 0
    for s in range(100):
        rng = np.random.default_rng(s)
        ds = uniform(150, s, side=128, d=2 + s % 2)
        level = int(rng.integers(3, 14))
        base = GridSpec.build(level, Fraction(1, 2), ds.dim, ds.side)
        shift = tuple(int(v) for v in rng.integers(0, base.side_scaled, size=ds.dim))
        g = GridSpec.build(level, Fraction(1, 2), ds.dim, ds.side, shift)
        cc = ref.exact_cell_components(ds, g)
        size, start = estimate_component(CondOracle(ds, seed=s), g, 10**9, Fraction(1, 20), rng)
        agree += size == cc.size_of_cell(g.decode(start))
    assert report("A8[bfs]", agree == 100, f"BFS size equals union-find on {agree}/100")


# ---------------------------------------------------------------- 9

def test_a9_occupied_cells(report):
    good, worst = 0, 0.0
    for s in range(100):
        rng = np.random.default_rng(s)
        if s % 2:
            ds = generate_dataset("collinear", {"n": 100, "spacing": int(rng.integers(2, 12))}, s)
        else:
            ds = uniform(300, s, side=512)
        mst = ref.exact_mst_weight(ds)
        level = int(rng.integers(10, 30))
        g, _ = choose_shift(CondOracle(ds, seed=s), level, Fraction(1, 5), Fraction(1, 10), rng)
        occ = len(ref.occupied_cells(ds, g))
        bound = 2 * (1 + math.sqrt(ds.dim) * mst / float(g.side_length))
        good += occ <= bound
        worst = max(worst, occ / bound)
    assert report("A9", good >= 95, f"occupied <= 2(1+sqrt(d) MST/R) in {good}/100 (>=95) "
                  f"max occupied/bound={worst:.3f}")


# ---------------------------------------------------------------- 10

@pytest.mark.parametrize("task,eps,trials", [("se", 0.1, 2), ("sum", 0.1, 2), ("mst", 0.5, 1)])
def test_a10_scaling(report, tmp_path, task, eps, trials):
    spec = ExperimentSpec(task="scaling", dataset="gen:uniform:side=10000", scale_task=task, eps=eps,
                          delta=0.1 if task == "mst" else 0.05, trials=trials, backend="ideal",
                          sizes=[1000, 10_000, 100_000, 1_000_000], max_slope=0.15, out=str(tmp_path))
    code = run(spec)
    sc = json.loads((tmp_path / "report.json").read_text())["scaling"]
    qs = ", ".join(f"{q:.0f}" for q in sc["mean_queries"])
    ok = code == 0 and sc["loglog_slope"] <= 0.15
    assert report(f"A10[{task}]", ok, f"loglog_slope={sc['loglog_slope']:.3f} (<=0.15) queries=[{qs}] "
                  f"ratio={sc['ratio']:.2f} (<={sc['allowed_ratio']:.1f})")
