"""Command-line entry point: one subcommand per experiment kind plus ``report``."""

from __future__ import annotations

import argparse
import logging
import os
import sys

from .exceptions import SphereLossError
from .experiments import KINDS, ExperimentConfig, emit_reports, run_experiment

log = logging.getLogger("sphereloss")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sphereloss", description="Angular-margin loss experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for kind in KINDS:
        p = sub.add_parser(kind, help=f"run the {kind} experiment")
        p.add_argument("--config", help="JSON experiment config")
        p.add_argument("--out", help="output directory (default: $SPHERELOSS_OUT)")
        p.add_argument("--seed", type=int, help="overrides the config seed")
    p = sub.add_parser("report", help="merge run summaries into comparison.csv")
    p.add_argument("--out", help="run directory to scan (default: $SPHERELOSS_OUT)")
    p.add_argument("--config", help="ignored; accepted for a uniform interface")
    p.add_argument("--seed", type=int, help="ignored; accepted for a uniform interface")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    out = args.out or os.environ.get("SPHERELOSS_OUT")
    try:
        if args.command == "report":
            if out is None:
                raise SphereLossError("report needs --out or SPHERELOSS_OUT")
            print(emit_reports(out))
            return 0
        cfg = ExperimentConfig.load(args.config, kind=args.command, out_dir=out, seed=args.seed)
        for path in run_experiment(cfg):
            print(path)
    except SphereLossError as exc:
        print(f"sphereloss {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError, TypeError) as exc:
        print(f"sphereloss {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
