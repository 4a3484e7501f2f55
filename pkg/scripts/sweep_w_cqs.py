"""Sweep the CQS loss weight over several seeds and tabulate NE, CQS MSE and recall.

The world and teachers are prepared once per seed and reused for every weight.
Whether CQS MSE falls as the weight grows is printed, not enforced.

    python scripts/sweep_w_cqs.py --seeds 0 1 2 --out runs/sweep_w_cqs
"""

import argparse
import logging
from pathlib import Path

import numpy as np

from earlyrank.experiment import load_config, sweep

WEIGHTS = (0.5, 1.0, 1.5, 2.0)
COLUMNS = ("ne_ctr", "mse_cqs", "soft_recall", "hard_recall", "tvd")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--weights", type=float, nargs="+", default=list(WEIGHTS))
    ap.add_argument("--out", default="runs/sweep_w_cqs")
    ap.add_argument("--config", default=None)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    table = {w: {c: [] for c in COLUMNS} for w in args.weights}
    for seed in args.seeds:
        rep = sweep("train.weights.w_cqs", args.weights, load_config(args.config, seed=seed),
                    Path(args.out) / f"seed_{seed}")
        for row in rep.rows():
            for c in COLUMNS:
                table[row["value"]][c].append(np.nan if row[c] is None else row[c])

    lines = ["| w_cqs | " + " | ".join(COLUMNS) + " |", "|---|" + "---|" * len(COLUMNS)]
    for w in args.weights:
        lines.append(f"| {w} | " + " | ".join(f"{np.nanmean(table[w][c]):.4f}" for c in COLUMNS) + " |")
    mse = [np.nanmean(table[w]["mse_cqs"]) for w in sorted(args.weights)]
    lines += ["", f"CQS MSE non-increasing in w_cqs (seed mean): {bool(np.all(np.diff(mse) <= 0))}"]
    text = "\n".join(lines) + "\n"
    Path(args.out).mkdir(parents=True, exist_ok=True)
    (Path(args.out) / "summary.md").write_text(text)
    print(text)


if __name__ == "__main__":
    main()
