#!/usr/bin/env python3
"""Run ablation suites on the synthetic benchmark and write the tables as JSON.

Defaults reproduce the shared budget in ``AblationSetup``: 8 classes,
200 training and 200 validation images per class, 3 seeds.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

from rsmamba.train import ABLATION_SUITES, AblationSetup, run_ablation


def main() -> int:
    suites = sorted(ABLATION_SUITES) + ["tokens"]
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("suites", nargs="*", default=["paths"], choices=suites, metavar="SUITE",
                    help=f"any of {suites} (default: paths)")
    ap.add_argument("--rows", help="comma-separated row labels to keep")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="ablations")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = [r.strip() for r in args.rows.split(",")] if args.rows else None
    for suite in args.suites:
        table = run_ablation(suite, AblationSetup(), seed=args.seed, rows=rows)
        print(f"== {suite}\n{table.format()}\n")
        (out / f"ablation_{suite}.json").write_text(json.dumps(table.to_dict(), indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
