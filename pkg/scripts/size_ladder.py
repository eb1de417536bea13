#!/usr/bin/env python3
"""Exponent error of learned logistic-map models as the dataset grows.

Prints the mean |lambda_model - lambda_true| per dataset size and writes the
per-seed values as CSV.
"""

import argparse
import csv
import logging
import sys

from lyaptransfer.experiments import LadderConfig, non_increasing, size_ladder


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--sizes", type=int, nargs="+", default=list(LadderConfig.sizes))
    ap.add_argument("--seeds", type=int, nargs="+", default=list(LadderConfig.seeds))
    ap.add_argument("--rho", type=float, default=LadderConfig.rho)
    ap.add_argument("--hidden", type=int, default=LadderConfig.hidden)
    ap.add_argument("--max-iter", type=int, default=LadderConfig.max_iter)
    ap.add_argument("--out", default="size_ladder.csv")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    cfg = LadderConfig(sizes=tuple(args.sizes), seeds=tuple(args.seeds), rho=args.rho, hidden=args.hidden,
                       max_iter=args.max_iter)
    res = size_ladder(cfg)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["size", "seed", "abs_error"])
        for n in cfg.sizes:
            for s, e in zip(cfg.seeds, res.errors[n]):
                w.writerow([n, s, repr(e)])
    print(f"lambda_true = {res.lambda_true:.6f}")
    for n, m in zip(sorted(res.errors), res.mean_errors()):
        print(f"size {n:>7}: mean |dlambda| = {m:.4f}")
    print("non-increasing:", non_increasing(res.mean_errors()))
    return 0


if __name__ == "__main__":
    sys.exit(main())
