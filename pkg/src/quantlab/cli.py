"""The ``quantlab`` command.

Usage: quantlab <subcommand> --config <path> [--seed N] [--bits list] [--out dir]

Exit codes: 0 on success, 2 on configuration errors, 3 on numerical failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace

import numpy as np

from .harness import SUBCOMMANDS, ConfigError, OutputLocked, load_config, run_experiment
from .model import InputError, TrainingDiverged


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="quantlab", description=__doc__)
    parser.add_argument("subcommand", choices=sorted(SUBCOMMANDS))
    parser.add_argument("--config", required=True, help="path to a JSON experiment config")
    parser.add_argument("--seed", type=int, default=None, help="override the seed list with one seed")
    parser.add_argument("--bits", default=None, help="comma-separated bit widths, e.g. 8,4,3,2")
    parser.add_argument("--out", default=None, help="override the output directory")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config)
        if args.seed is not None:
            config = replace(config, seeds=[args.seed])
        if args.bits is not None:
            bits = [int(b) for b in args.bits.split(",") if b]
            config = replace(config, quant=replace(config.quant, bits=bits))
        if args.out is not None:
            config = replace(config, output_dir=args.out)
    except (ConfigError, ValueError) as exc:
        print(f"quantlab: config error: {exc}", file=sys.stderr)
        return 2

    try:
        summary = run_experiment(args.subcommand, config)
    except (ConfigError, InputError, OutputLocked) as exc:
        print(f"quantlab: config error: {exc}", file=sys.stderr)
        return 2
    except (TrainingDiverged, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"quantlab: numerical failure: {exc}", file=sys.stderr)
        return 3

    print(f"quantlab {args.subcommand}: wrote artifacts to {config.output_dir}")
    if isinstance(summary, dict):
        for key, value in summary.items():
            if not isinstance(value, (list, dict)):
                print(f"  {key}: {value}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
