"""Experiment CLI: dataset generation, trials, scaling studies, reports.

    condsub <task> --dataset <path|gen:kind[:k=v,...]> --eps E --delta D \
        --seed S --trials T --out DIR [--jobs J] [--config spec.json]

A JSON config supplies defaults; command-line flags win.  Each trial owns
its oracle and random stream, so trials can run in worker processes; rows
are always written in trial order.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import subprocess
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .domain import Dataset, UsageError, load_dataset
from .predicate import (FALSE, TRUE, Add, Const, Coord, FloorDiv, HalfSpace, SqDistCompare, SqDistTo,
                        weight_fn)

TASKS = ("se", "dv", "max", "sum", "wcond", "des", "kmeans", "mst", "scaling")
CSV_HEADER = ["trial", "seed", "estimate", "exact", "rel_error", "success", "queries", "desc_cost", "wall_ms"]


# ================================================================ datasets

def _distinct_rows(rows: np.ndarray, n: int) -> np.ndarray:
    _, first = np.unique(rows, axis=0, return_index=True)
    return rows[np.sort(first)][:n]


def generate_dataset(kind: str, params: dict | None = None, seed: int = 0) -> Dataset:
    """Deterministic synthetic data.

    uniform(n, d, side); clustered(n, k, sigma, d, side, separation); collinear(n,
    spacing, d); lattice(n, spacing, d).  Points are distinct; duplicates
    from sampling are rejected and redrawn.
    """
    p = dict(params or {})
    rng = np.random.default_rng(seed)
    n = int(p.get("n", 1000))
    d = int(p.get("d", 2))
    if n < 1 or d < 1:
        raise UsageError("need n >= 1 and d >= 1")
    if kind == "uniform":
        side = int(p.get("side", 1000))
        if n > side**d:
            raise UsageError(f"cannot place {n} distinct points in [1,{side}]^{d}")
        pts = np.zeros((0, d), dtype=np.int64)
        while len(pts) < n:
            extra = rng.integers(1, side + 1, size=(max(16, int((n - len(pts)) * 1.1) + 8), d))
            pts = _distinct_rows(np.concatenate([pts, extra]), n)
        return Dataset(pts, side=p.get("domain_side"))
    if kind == "clustered":
        side = int(p.get("side", 1000))
        k = int(p.get("k", 4))
        sigma = float(p.get("sigma", 10.0))
        lo, hi = max(1, int(side * 0.1)), max(2, int(side * 0.9))
        sep = float(p.get("separation", 0))
        for _ in range(1000):
            centers = rng.integers(lo, hi + 1, size=(k, d))
            gaps = np.sqrt(((centers[:, None, :] - centers[None, :, :]) ** 2).sum(-1))
            if k == 1 or gaps[np.triu_indices(k, 1)].min() >= sep:
                break
        else:
            raise UsageError(f"cannot place {k} centers {sep} apart in [1,{side}]^{d}")
        pts = np.zeros((0, d), dtype=np.int64)
        labels = np.zeros(0, dtype=np.int64)
        for _ in range(200):
            if len(pts) >= n:
                break
            m = max(16, int((n - len(pts)) * 1.2) + 8)
            # the first batch visits every center once so all k are used
            lab = np.concatenate([np.arange(k), rng.integers(k, size=m)]) if len(pts) == 0 else rng.integers(k, size=m)
            raw = np.rint(centers[lab] + rng.normal(0.0, sigma, size=(len(lab), d))).astype(np.int64)
            rows = np.concatenate([pts, np.clip(raw, 1, side)])
            lab = np.concatenate([labels, lab])
            _, first = np.unique(rows, axis=0, return_index=True)
            keep = np.sort(first)[:n]
            pts, labels = rows[keep], lab[keep]
        if len(pts) < n:
            raise UsageError("cannot place that many distinct clustered points; raise sigma or side")
        ds = Dataset(pts, side=p.get("domain_side"))
        ds.info = {"centers": centers, "labels": labels}
        return ds
    if kind == "collinear":
        spacing = int(p.get("spacing", 10))
        pts = np.ones((n, d), dtype=np.int64)
        pts[:, 0] = 1 + spacing * np.arange(n)
        return Dataset(pts, side=p.get("domain_side"))
    if kind in ("lattice", "grid-lattice"):
        spacing = int(p.get("spacing", 1))
        per = math.ceil(n ** (1 / d) - 1e-9)
        while per**d < n:
            per += 1
        grid = np.stack(np.unravel_index(np.arange(n), (per,) * d), axis=1)
        return Dataset(1 + spacing * grid.astype(np.int64), side=p.get("domain_side"))
    raise UsageError(f"unknown dataset kind {kind!r}")


def parse_dataset_arg(arg: str) -> tuple[str, dict] | str:
    """'gen:kind:k=v,...' -> (kind, params); anything else is a file path."""
    if not arg.startswith("gen:"):
        return arg
    body = arg[4:]
    kind, _, rest = body.partition(":")
    params = {}
    for tok in filter(None, rest.split(",")):
        key, _, val = tok.partition("=")
        try:
            params[key] = int(val)
        except ValueError:
            params[key] = float(val)
    return kind, params


def _dataset_for(source, seed: int, n=None, dedupe=False) -> Dataset:
    if isinstance(source, str):
        return load_dataset(source, dedupe=dedupe)
    kind, params = source
    params = dict(params)
    if n is not None:
        params["n"] = n
    return generate_dataset(kind, params, seed)


# ================================================================ spec

@dataclass
class ExperimentSpec:
    task: str
    dataset: str
    eps: float = 0.1
    delta: float = 0.05
    seed: int = 0
    trials: int = 1
    out: str = "out"
    jobs: int = 1
    backend: str = "nisan"
    predicate: str = "halfspace"
    tolerance: float | None = None
    max_failure: float | None = None
    timing: bool = False
    dedupe: bool = False
    bucket: int = 10
    draws: int = 2000
    k: int = 4
    beta: float = 8
    max_level_override: int | None = None
    scale_task: str = "se"
    sizes: list = field(default_factory=lambda: [1000, 10000, 100000, 1000000])
    scale_exponent: float = 4.0
    max_slope: float | None = None

    def __post_init__(self):
        if self.task not in TASKS:
            raise UsageError(f"unknown task {self.task!r}; choose from {', '.join(TASKS)}")
        if self.trials < 1:
            raise UsageError("trials must be >= 1")
        if self.jobs < 1:
            raise UsageError("jobs must be >= 1")
        if self.backend not in ("nisan", "ideal"):
            raise UsageError("backend must be nisan or ideal")


def trial_seed(base: int, j: int) -> int:
    return int(np.random.SeedSequence(base, spawn_key=(j,)).generate_state(1, np.uint64)[0])


# ================================================================ tasks

def _rel(est, exact) -> float:
    if math.isnan(exact):
        return math.nan
    if exact == 0:
        return 0.0 if est == 0 else math.inf
    return abs(est - exact) / abs(exact)


def _random_halfspace(ds: Dataset, rng):
    a = rng.integers(-100, 101, size=ds.dim)
    while not a.any():
        a = rng.integers(-100, 101, size=ds.dim)
    c = rng.integers(1, ds.side + 1, size=ds.dim)
    return HalfSpace(a.tolist(), "<=", int(a @ c))


def _predicate(name: str, ds: Dataset, rng):
    if name == "true":
        return TRUE
    if name == "false":
        return FALSE
    if name == "halfspace":
        return _random_halfspace(ds, rng)
    if name == "ball":
        c = tuple(int(v) for v in rng.integers(1, ds.side + 1, size=ds.dim))
        return SqDistCompare(c, "<=", int((ds.side // 4) ** 2))
    raise UsageError(f"unknown predicate {name!r}")


def _center_weight(ds: Dataset, rng):
    c = tuple(int(v) for v in rng.integers(1, ds.side + 1, size=ds.dim))
    return weight_fn(Add((SqDistTo(c), Const(1))), ds.side)


def _tv(counts: np.ndarray, target: np.ndarray) -> float:
    emp = counts / max(1, counts.sum())
    return 0.5 * float(np.abs(emp - target).sum())


def run_trial(spec: ExperimentSpec, task: str, ds: Dataset, seed: int) -> dict:
    """One trial; returns the CSV row fields except trial/seed/wall_ms."""
    from . import primitives as P
    from . import reference as ref
    from .domain import Params
    from .oracle import CondOracle

    rng = np.random.default_rng(seed)
    eps, delta = Fraction(spec.eps).limit_denominator(10**6), Fraction(spec.delta).limit_denominator(10**6)
    tol = spec.tolerance if spec.tolerance is not None else float(eps)
    oracle = CondOracle(ds, seed=seed, backend=spec.backend)
    extra: dict = {}
    # reference scans are refused above the guard; such trials only report cost
    checkable = ds.n <= ref.GUARD_N
    if task == "se":
        C = _predicate(spec.predicate, ds, rng)
        exact = ref.exact_set_size(ds, C) if checkable else math.nan
        est = float(P.support_estimation(oracle, C, eps, delta, rng).value)
        rel = _rel(est, exact)
        ok = rel <= tol
    elif task == "dv":
        f = weight_fn(FloorDiv(Coord(0), spec.bucket), ds.side)
        C = _predicate(spec.predicate if spec.predicate != "halfspace" else "true", ds, rng)
        exact = ref.exact_distinct(ds, f, C) if checkable else math.nan
        est = float(P.distinct_values(oracle, C, f, eps, delta, rng).value)
        rel = _rel(est, exact)
        ok = rel <= tol
    elif task == "max":
        f = _center_weight(ds, rng)
        exact = (ref.exact_max(ds, f) or 0) if checkable else math.nan
        got, fell_back = P.max_random(oracle, TRUE, f, delta, return_info=True)
        est = got or 0
        rel = _rel(est, exact)
        ok = est == exact or not checkable
        extra["fell_back"] = fell_back
    elif task == "sum":
        f = _center_weight(ds, rng)
        exact = ref.exact_sum(ds, f, TRUE) if checkable else math.nan
        est = float(P.sum_weights(oracle, TRUE, f, eps, delta, rng).value)
        rel = _rel(est, exact)
        ok = rel <= tol
    elif task == "wcond":
        f = weight_fn(Add(tuple(Coord(j) for j in range(ds.dim))), ds.side)
        w = np.array([f.value(p) for p in ds.points], dtype=float)
        total = P.sum_weights(oracle, TRUE, f, Fraction(1, 2), delta, rng).value
        counts = np.zeros(ds.n)
        misses = 0
        for _ in range(spec.draws):
            x = P.wcond(oracle, TRUE, f, eps, delta, rng, total=total)
            if x is None:
                misses += 1
            else:
                counts[ds.points.index(x) if ds.n <= 64 else _locate(ds, x)] += 1
        est = _tv(counts, w / w.sum())
        exact = 0.0
        rel = est
        ok = est <= tol
        extra["no_output_rate"] = misses / spec.draws
    elif task == "des":
        f = weight_fn(FloorDiv(Coord(0), spec.bucket), ds.side)
        classes = ref.exact_value_classes(ds, f)
        keys = sorted(classes)
        pos = {v: j for j, v in enumerate(keys)}
        counts = np.zeros(len(keys))
        for _ in range(spec.draws):
            x = P.des(oracle, TRUE, f, min(eps, Fraction(1, f.bound)), delta, rng)
            if x is not None:
                counts[pos[f.value(x)]] += 1
        est = _tv(counts, np.full(len(keys), 1 / len(keys)))
        exact = 0.0
        rel = est
        ok = est <= tol
    elif task == "kmeans":
        from .kmeans import kmeans_pipeline

        cl, rep = kmeans_pipeline(oracle, spec.k, Params(eps, delta, seed % 2**63), beta=spec.beta)
        est = ref.exact_kmeans_cost(ds, cl.centers)
        if ds.n <= ref.KMEANS_GUARD_N:
            exact, _ = ref.exact_kmeans_baseline(ds, spec.k, 50, seed % 2**31)
        else:
            exact = math.nan
        tol = spec.tolerance if spec.tolerance is not None else 20.0
        rel = est / exact - 1 if exact > 0 else (0.0 if est == 0 else math.inf)
        ok = (est <= tol * exact) if exact > 0 else est == 0
        extra["estimated_cost"] = rep["estimated_cost"]
    elif task == "mst":
        from .mst import MSTConfig, estimate_mst_weight

        cfg = MSTConfig(max_level_override=spec.max_level_override)
        est = float(estimate_mst_weight(oracle, eps, delta, rng, cfg).value)
        exact = ref.exact_mst_weight(ds) if checkable else math.nan
        rel = _rel(est, exact)
        ok = rel <= tol
    else:
        raise UsageError(f"task {task!r} has no single-trial form")
    if math.isnan(exact):
        rel, ok = math.nan, True
        extra["unverified"] = True
    return {"estimate": est, "exact": exact, "rel_error": rel, "success": bool(ok),
            "queries": oracle.query_count, "desc_cost": oracle.total_description_size, "extra": extra}


def _locate(ds: Dataset, x) -> int:
    hit = np.flatnonzero((ds.coords == np.asarray(x)).all(1))
    return int(hit[0])


def _trial_job(args):
    spec, task, source, seed, n = args
    t0 = time.perf_counter()
    ds = _dataset_for(source, seed, n, spec.dedupe)
    row = run_trial(spec, task, ds, seed)
    row["wall_ms"] = (time.perf_counter() - t0) * 1e3
    row["n"] = ds.n
    return row


def _run_jobs(spec: ExperimentSpec, jobs_args: list) -> list:
    if spec.jobs > 1 and len(jobs_args) > 1:
        with ProcessPoolExecutor(max_workers=spec.jobs) as ex:
            return list(ex.map(_trial_job, jobs_args))
    return [_trial_job(a) for a in jobs_args]


# ================================================================ reports

def git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=10)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        if math.isnan(v) or math.isinf(v):
            return str(v)
        return repr(round(v, 10))
    return str(v)


def aggregate(rows: list) -> dict:
    rel = np.array([r["rel_error"] for r in rows], dtype=float)
    q = np.array([r["queries"] for r in rows], dtype=float)
    cost = np.array([r["desc_cost"] for r in rows], dtype=float)
    fin = rel[np.isfinite(rel)]
    return {
        "trials": len(rows),
        "unverified": int(sum(bool(r.get("extra", {}).get("unverified")) for r in rows)),
        "failure_rate": float(np.mean([not r["success"] for r in rows])),
        "p50_rel_error": float(np.percentile(fin, 50)) if len(fin) else None,
        "p95_rel_error": float(np.percentile(fin, 95)) if len(fin) else None,
        "queries": {"mean": float(q.mean()), "median": float(np.median(q)), "min": float(q.min()),
                    "max": float(q.max())},
        "desc_cost": {"mean": float(cost.mean()), "median": float(np.median(cost))},
    }


def loglog_slope(ns, qs) -> float:
    """Least-squares slope of log(queries) against log(n)."""
    x = np.log(np.asarray(ns, dtype=float))
    y = np.log(np.asarray(qs, dtype=float))
    xm = x - x.mean()
    return float((xm * (y - y.mean())).sum() / (xm**2).sum())


def write_reports(spec: ExperimentSpec, rows: list, extra: dict, out: Path) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(CSV_HEADER)
        for r in rows:
            w.writerow([_fmt(r["trial"]), _fmt(r["seed"]), _fmt(r["estimate"]), _fmt(r["exact"]),
                        _fmt(r["rel_error"]), _fmt(r["success"]), _fmt(r["queries"]), _fmt(r["desc_cost"]),
                        _fmt(r["wall_ms"]) if spec.timing else ""])
    report = {"config": asdict(spec), "git_describe": git_describe(), "aggregate": aggregate(rows), **extra}
    report["trial_extras"] = [r.get("extra", {}) for r in rows]
    with open(out / "report.json", "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True, default=str)
    return report


def run(spec: ExperimentSpec) -> int:
    """Run an experiment and write report.csv / report.json; returns the exit code."""
    source = parse_dataset_arg(spec.dataset)
    out = Path(spec.out)
    if spec.task == "scaling":
        if isinstance(source, str):
            raise UsageError("scaling needs a gen: dataset")
        if spec.scale_task not in ("se", "dv", "max", "sum", "mst"):
            raise UsageError("scaling supports se, dv, max, sum and mst")
        args, tags = [], []
        for n in spec.sizes:
            for j in range(spec.trials):
                s = trial_seed(spec.seed, j)
                args.append((spec, spec.scale_task, source, s, int(n)))
                tags.append((n, j, s))
        res = _run_jobs(spec, args)
        rows = []
        for i, ((n, j, s), r) in enumerate(zip(tags, res)):
            rows.append({**r, "trial": i, "seed": s})
        per_n = {}
        for (n, _, _), r in zip(tags, res):
            per_n.setdefault(int(n), []).append(r["queries"])
        ns = sorted(per_n)
        means = [float(np.mean(per_n[n])) for n in ns]
        slope = loglog_slope(ns, means)
        ratio = means[-1] / means[0]
        allowed = (math.log2(ns[-1]) / math.log2(ns[0])) ** spec.scale_exponent
        passed = ratio <= allowed and (spec.max_slope is None or slope <= spec.max_slope)
        extra = {"scaling": {"task": spec.scale_task, "sizes": ns, "mean_queries": means, "loglog_slope": slope,
                             "ratio": ratio, "allowed_ratio": allowed}, "passed": bool(passed)}
        write_reports(spec, rows, extra, out)
        return 0 if passed else 1
    args = []
    for j in range(spec.trials):
        s = trial_seed(spec.seed, j)
        args.append((spec, spec.task, source, s, None))
    res = _run_jobs(spec, args)
    rows = [{**r, "trial": j, "seed": a[3]} for j, (a, r) in enumerate(zip(args, res))]
    agg = aggregate(rows)
    limit = spec.max_failure if spec.max_failure is not None else float(spec.delta)
    passed = agg["failure_rate"] <= limit
    write_reports(spec, rows, {"passed": bool(passed), "max_failure": limit}, out)
    return 0 if passed else 1


# ================================================================ CLI

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="condsub", description="Conditional-sampling experiments")
    p.add_argument("task", choices=TASKS)
    p.add_argument("--config", help="JSON spec file; flags override its values")
    p.add_argument("--dataset", help="file path or gen:kind[:key=value,...]")
    p.add_argument("--eps", type=float)
    p.add_argument("--delta", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--trials", type=int)
    p.add_argument("--out")
    p.add_argument("--jobs", type=int)
    p.add_argument("--backend", choices=("nisan", "ideal"))
    p.add_argument("--predicate", choices=("halfspace", "true", "false", "ball"))
    p.add_argument("--tolerance", type=float, help="rel_error bound for a successful trial (default eps)")
    p.add_argument("--max-failure", type=float, help="failure rate allowed for exit code 0 (default delta)")
    p.add_argument("--timing", action="store_true", default=None, help="fill the wall_ms column")
    p.add_argument("--dedupe", action="store_true", default=None, help="drop duplicate input points")
    p.add_argument("--bucket", type=int, help="dv/des value function floor(x_1 / bucket)")
    p.add_argument("--draws", type=int, help="samples per wcond/des trial")
    p.add_argument("--k", type=int)
    p.add_argument("--beta", type=float)
    p.add_argument("--max-level-override", type=int)
    p.add_argument("--scale-task", choices=("se", "dv", "max", "sum", "mst"))
    p.add_argument("--sizes", help="comma-separated n values for scaling")
    p.add_argument("--scale-exponent", type=float)
    p.add_argument("--max-slope", type=float)
    return p


def spec_from_args(argv=None) -> ExperimentSpec:
    args = build_parser().parse_args(argv)
    values: dict = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            values.update(json.load(fh))
    for key, val in vars(args).items():
        if key == "config" or val is None:
            continue
        values[key] = val
    if isinstance(values.get("sizes"), str):
        values["sizes"] = [int(float(v)) for v in values["sizes"].split(",") if v]
    if "jobs" not in values:
        values["jobs"] = int(os.environ.get("CONDSUB_JOBS", "1"))
    if "dataset" not in values:
        raise UsageError("--dataset is required")
    return ExperimentSpec(**values)


def main(argv=None) -> int:
    try:
        spec = spec_from_args(argv)
        return run(spec)
    except (UsageError, ValueError, OSError) as exc:
        print(f"condsub: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
