"""Worst finite-difference relative error per op as the step h shrinks.

Truncation error of central differences falls as h^2, so a failing op whose
error drops 100x per decade of h has a correct backward pass.

    python scripts/fd_step_sweep.py --steps 1e-3 1e-4 1e-5
"""
import argparse

from bss import gradcheck


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=float, nargs="+", default=[1e-3, 1e-4, 1e-5, 1e-6])
    ap.add_argument("--ops", nargs="+", default=list(gradcheck.CORE_OPS))
    ap.add_argument("--trials", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    print(f"{'op':<16}" + "".join(f"{h:>12.0e}" for h in args.steps))
    for op in args.ops:
        errs = [gradcheck.check_op(op, trials=args.trials, seed=args.seed, h=h).max_rel_error for h in args.steps]
        print(f"{op:<16}" + "".join(f"{e:>12.2e}" for e in errs))


if __name__ == "__main__":
    main()
