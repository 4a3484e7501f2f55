"""Ablation matrix on one shared world and teacher checkpoint.

Runs mtl_full, dedicated_ctr_plus_cqs, mtl_no_teacher and mtl_no_augmentation
by default; ``--all`` adds dedicated_cqs_only and production_baseline.

    python scripts/ablation.py --out runs/ablation [--seed 0] [--all]
"""

import argparse
import logging

from earlyrank.experiment import ABLATION_VARIANTS, VARIANTS, load_config, run_ablation_matrix


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/ablation")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--config", default=None)
    ap.add_argument("--all", action="store_true", help="run every variant")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    variants = VARIANTS if args.all else ABLATION_VARIANTS
    report = run_ablation_matrix(load_config(args.config, seed=args.seed), variants, args.out)
    print(report.to_markdown())


if __name__ == "__main__":
    main()
