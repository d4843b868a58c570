"""Relative error of the MST weight estimate on uniform points."""
import argparse
from fractions import Fraction

import numpy as np

from condsub import reference as ref
from condsub.harness import generate_dataset
from condsub.mst import estimate_mst_weight
from condsub.oracle import CondOracle


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n", type=int, default=2000)
    ap.add_argument("--d", type=int, default=2)
    ap.add_argument("--side", type=int, default=1000)
    ap.add_argument("--eps", type=float, default=0.2)
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--backend", default="nisan", choices=["ideal", "nisan"])
    args = ap.parse_args()
    eps = Fraction(args.eps).limit_denominator(1000)
    errs = []
    for s in range(args.seeds):
        ds = generate_dataset("uniform", {"n": args.n, "d": args.d, "side": args.side}, s)
        exact = ref.exact_mst_weight(ds)
        o = CondOracle(ds, seed=s, backend=args.backend)
        est = estimate_mst_weight(o, eps, Fraction(1, 10), s)
        errs.append(est.value / exact - 1)
        print(f"seed={s:3d}  exact={exact:12.1f}  estimate={est.value:12.1f}  ratio={est.value / exact:.3f}  "
              f"queries={o.query_count}")
    errs = np.abs(errs)
    print(f"median |rel err|={np.median(errs):.3f}  max={errs.max():.3f}")


if __name__ == "__main__":
    main()
