"""Median gap between the closed-form SimAM energy and the exact leave-one-out minimum.

    python scripts/approx_gap.py --sizes 16 64 256 1024 6400
"""
import argparse

import numpy as np

from bss.checks import approximation_gap


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[16, 64, 256, 1024, 6400])
    ap.add_argument("--lam", type=float, default=1e-4)
    ap.add_argument("--channels", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    rng = np.random.default_rng(args.seed)
    print(f"{'M':>6}  median gap")
    for m in args.sizes:
        print(f"{m:>6}  {approximation_gap(m, rng, args.lam, args.channels):.4e}")


if __name__ == "__main__":
    main()
