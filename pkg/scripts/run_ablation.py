#!/usr/bin/env python3
"""Paired baseline vs GREEN cross-validation on synthetic noisy ordinal data.

    python3 scripts/run_ablation.py --seeds 5
    python3 scripts/run_ablation.py --seeds 3 --lr 1e-3 1e-2 --csv sweep.csv
"""
import argparse
import csv
import dataclasses
import sys
import time

from green.ablation import ABLATION_DATA, ABLATION_TRAIN, run_ablation


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--lr", type=float, nargs="+", default=[ABLATION_TRAIN.learning_rate])
    p.add_argument("--epochs", type=int, default=ABLATION_TRAIN.epochs)
    p.add_argument("--noise-p", type=float, default=ABLATION_DATA.noise_p)
    p.add_argument("--source", choices=["true", "observed"], default="true")
    p.add_argument("--csv", help="append per-seed rows here")
    args = p.parse_args(argv)

    data = dataclasses.replace(ABLATION_DATA, noise_p=args.noise_p)
    rows = []
    for lr in args.lr:
        train = ABLATION_TRAIN.replace(learning_rate=lr, epochs=args.epochs)
        start = time.perf_counter()
        res = run_ablation(range(args.seeds), data, train, source=args.source,
                           progress=lambda msg: print(f"  [lr={lr:g}] {msg}", file=sys.stderr))
        print(f"\nlearning rate {lr:g} ({time.perf_counter() - start:.1f}s)")
        print(res.table())
        for s, b, g in zip(res.seeds, res.baseline, res.green):
            rows.append({"lr": lr, "seed": s, **{f"baseline_{k}": v for k, v in b.items()},
                         **{f"green_{k}": v for k, v in g.items()}})
    if args.csv and rows:
        with open(args.csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)


if __name__ == "__main__":
    main()
