#!/usr/bin/env python3
"""Train the full routing grid (sparse/dense x expert counts x balancing)
and print the comparison table."""

import argparse

from framemoe.config import ExperimentConfig, apply_overrides, validate
from framemoe.experiment import run_ablate


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="runs/ablate")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--jobs", type=int, default=1)
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE")
    args = parser.parse_args()

    cfg = ExperimentConfig(seed=args.seed, output_dir=args.out)
    if args.overrides:
        cfg = apply_overrides(cfg, args.overrides)
    validate(cfg)

    for row in run_ablate(cfg, jobs=args.jobs):
        bal = "on " if row["balancing_requested"] else "off"
        note = "" if row["balancing_applied"] == row["balancing_requested"] else " (n/a)"
        print(f"{row['routing']:>6s} n={row['n_experts']} bal={bal}{note}  "
              f"total={row['final_total']:.4f} f1_macro={row['f1_macro']:.3f} "
              f"ssnr={row['ssnr_db']:+.2f} dB")


if __name__ == "__main__":
    main()
