"""Mean query counts against n for the sublinear tasks, with the log-log slope."""
import argparse
import json
import tempfile
from pathlib import Path

from condsub.harness import ExperimentSpec, run

TASKS = {"se": (0.1, 0.05), "sum": (0.1, 0.05), "max": (0.1, 0.1), "dv": (0.1, 0.05), "mst": (0.5, 0.1)}


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--tasks", default="se,sum,max,mst")
    ap.add_argument("--sizes", default="1000,10000,100000,1000000")
    ap.add_argument("--trials", type=int, default=2)
    ap.add_argument("--backend", default="ideal", choices=["ideal", "nisan"])
    ap.add_argument("--out", default=None, help="keep the reports here")
    args = ap.parse_args()
    sizes = [int(v) for v in args.sizes.split(",")]
    base = Path(args.out) if args.out else Path(tempfile.mkdtemp())
    print(f"{'task':5s} " + " ".join(f"{n:>10d}" for n in sizes) + "   slope")
    for task in args.tasks.split(","):
        eps, delta = TASKS[task]
        spec = ExperimentSpec(task="scaling", dataset="gen:uniform:side=10000", scale_task=task, eps=eps,
                              delta=delta, trials=args.trials, backend=args.backend, sizes=sizes,
                              out=str(base / task))
        run(spec)
        sc = json.loads((base / task / "report.json").read_text())["scaling"]
        print(f"{task:5s} " + " ".join(f"{q:10.0f}" for q in sc["mean_queries"]) + f"   {sc['loglog_slope']:.3f}")


if __name__ == "__main__":
    main()
