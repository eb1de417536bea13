#!/usr/bin/env python3
"""Divergence time of the transfer methods on the hand surrogate, per seed.

Reproduces the qualitative ordering experiment: cumulative residual against
direct reuse, trajectory against one-step fine-tuning.
"""

import argparse
import json
import logging
import sys

import numpy as np

from lyaptransfer.experiments import TrendConfig, transfer_trend, trend_counts


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=10, help="number of seeds, starting at 0")
    ap.add_argument("--fraction", type=float, default=TrendConfig.fraction)
    ap.add_argument("--out", default="transfer_trend.json")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    cfg = TrendConfig(fraction=args.fraction, seeds=tuple(range(args.seeds)))
    times, _ = transfer_trend(cfg)
    counts = trend_counts(times)
    with open(args.out, "w") as fh:
        json.dump({"fraction": cfg.fraction, "divergence_time": times, "counts": counts}, fh, indent=2)
    for k, v in times.items():
        print(f"{k:>22}: mean {np.mean(v):7.1f}  per seed {[round(t, 1) for t in v]}")
    print(counts)
    return 0


if __name__ == "__main__":
    sys.exit(main())
