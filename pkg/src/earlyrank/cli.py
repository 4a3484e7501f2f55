"""Command line entry point: ``earlyrank {run,ablate,sweep,replay-eval}``.

Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

import yaml

from .errors import ConfigError
from .experiment import (
    ABLATION_VARIANTS,
    load_config,
    replay_eval,
    run_ablation_matrix,
    run_scenario,
    sweep,
)

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON scenario config; omitted keys keep defaults")
    common.add_argument("--seed", type=int, help="run seed (also used as the world seed)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="PATH=VALUE",
                        help="override a config value by dotted path, e.g. train.weights.w_cqs=1.0")
    common.add_argument("--out", help="output directory for reports and the run checkpoint")
    common.add_argument("-v", "--verbose", action="store_true", help="log phase progress")

    parser = argparse.ArgumentParser(prog="earlyrank", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="verb", required=True)
    sub.add_parser("run", parents=[common], help="one variant end to end")
    ab = sub.add_parser("ablate", parents=[common], help="mtl_full plus the ablation variants")
    ab.add_argument("--variants", nargs="+", default=list(ABLATION_VARIANTS),
                    help="variants to run on the shared world and teachers")
    sw = sub.add_parser("sweep", parents=[common], help="one run per value of a config path")
    sw.add_argument("--param", required=True, help="dotted config path to sweep")
    sw.add_argument("--values", nargs="*", default=[],
                    help="values (parsed as YAML scalars); none gives an empty report")
    rp = sub.add_parser("replay-eval", parents=[common], help="re-evaluate students of a run checkpoint")
    rp.add_argument("run_dir", help="directory written by run/ablate --out")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.verb == "replay-eval":
            report = replay_eval(args.run_dir, args.out)
            print(report.to_markdown())
            return EXIT_OK
        cfg = load_config(args.config, args.overrides, args.seed)
        if args.verb == "run":
            print(run_scenario(cfg, args.out).to_markdown())
        elif args.verb == "ablate":
            print(run_ablation_matrix(cfg, tuple(args.variants), args.out).to_markdown())
        else:
            values = [yaml.safe_load(v) for v in args.values]
            print(sweep(args.param, values, cfg, args.out).to_markdown())
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # reported, not re-raised: the exit code carries the outcome
        logging.getLogger("earlyrank").debug("failure", exc_info=True)
        print(f"run failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
