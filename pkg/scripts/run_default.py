"""Run mtl_full on the default scenario and write the report plus checkpoint.

    python scripts/run_default.py --out runs/default [--seed 0]
"""

import argparse
import logging

from earlyrank.experiment import load_config, run_scenario


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/default")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--config", default=None)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    report = run_scenario(load_config(args.config, seed=args.seed), args.out)
    print(report.to_markdown())


if __name__ == "__main__":
    main()
