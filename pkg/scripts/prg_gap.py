"""Exact distinguishing gaps of the Nisan generator against random small automata.

Every seed is enumerated, so keep S and N small (the seed has S(1 + 2r) bits).
"""
import argparse

import numpy as np

from condsub.prg import Automaton, distinguisher_gap


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--configs", default="2:8,2:16,3:9,3:12", help="S:N pairs")
    ap.add_argument("--automata", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    rng = np.random.default_rng(args.seed)
    for item in args.configs.split(","):
        S, N = (int(v) for v in item.split(":"))
        gaps = np.array([float(distinguisher_gap(S, N, Automaton.random(S, rng))) for _ in range(args.automata)])
        print(f"S={S} N={N:2d}  mean={gaps.mean():.4f}  max={gaps.max():.4f}  bound 2^-S={2.0**-S:.4f}")


if __name__ == "__main__":
    main()
