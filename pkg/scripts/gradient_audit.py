#!/usr/bin/env python3
"""Finite-difference audit of every trainable parameter, frozen and
unfrozen backbone variants, at the compact audit geometry."""

import argparse
import sys

from framemoe.config import ExperimentConfig
from framemoe.experiment import run_gradcheck


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--step", type=float, default=1e-5)
    parser.add_argument("--tolerance", type=float, default=1e-4)
    parser.add_argument("--out", default="runs/gradcheck_report.json")
    args = parser.parse_args()

    results = run_gradcheck(ExperimentConfig(seed=args.seed), step=args.step,
                            tolerance=args.tolerance, out_path=args.out)
    for variant in ("frozen", "unfrozen"):
        r = results[variant]
        print(f"{variant:>9s}: {'ok' if r['passed'] else 'FAILED'}  "
              f"max_rel_err={r['max_rel_err']:.2e} over {r['n_entries']} entries")
    print(f"report: {args.out} ({results['runtime_s']:.1f}s)")
    return 0 if results["passed"] else 2


if __name__ == "__main__":
    sys.exit(main())
