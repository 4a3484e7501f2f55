"""Multi-seed comparison of variants at the default scenario.

Prints per-seed means and the across-seed summary for the metrics the
directional checks look at, and how often each variant beats mtl_full.

    python scripts/multi_seed.py --seeds 0 1 2 3 4 5 6 7 8 9 --out runs/multi_seed
"""

import argparse
import json
import logging
from pathlib import Path

import numpy as np

from earlyrank.experiment import HIGHER_IS_BETTER, load_config, run_ablation_matrix

VARIANTS = ("mtl_full", "mtl_no_augmentation", "mtl_no_teacher", "production_baseline")
COLUMNS = ("soft_recall", "hard_recall", "tvd", "ne_ctr", "distill_gap", "calibration", "xout_rate")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=list(range(10)))
    ap.add_argument("--variants", nargs="+", default=list(VARIANTS))
    ap.add_argument("--out", default="runs/multi_seed")
    ap.add_argument("--config", default=None)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    out = Path(args.out)
    means = {}
    for seed in args.seeds:
        rep = run_ablation_matrix(load_config(args.config, seed=seed), args.variants,
                                  out / f"seed_{seed}")
        means[seed] = {v: {m: r.metrics[m].mean for m in COLUMNS} for v, r in rep.results.items()}

    lines = []
    for m in COLUMNS:
        lines += [f"## {m}", "", "| seed | " + " | ".join(args.variants) + " |",
                  "|---|" + "---|" * len(args.variants)]
        for seed in args.seeds:
            lines.append(f"| {seed} | " + " | ".join(f"{means[seed][v][m]:.4f}" for v in args.variants) + " |")
        col = {v: np.array([means[s][v][m] for s in args.seeds]) for v in args.variants}
        lines.append("| mean | " + " | ".join(f"{col[v].mean():.4f}" for v in args.variants) + " |")
        better = HIGHER_IS_BETTER[m]
        if better is not None and "mtl_full" in col:
            wins = [int(((col["mtl_full"] > col[v]) if better else (col["mtl_full"] < col[v])).sum())
                    for v in args.variants]
            lines.append("| mtl_full better | " + " | ".join(
                "-" if v == "mtl_full" else f"{w}/{len(args.seeds)}" for v, w in zip(args.variants, wins)) + " |")
        lines.append("")
    text = "\n".join(lines)
    out.mkdir(parents=True, exist_ok=True)
    (out / "summary.md").write_text(text)
    (out / "summary.json").write_text(json.dumps(means, indent=2) + "\n")
    print(text)


if __name__ == "__main__":
    main()
