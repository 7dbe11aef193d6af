"""Command-line entry point for the pipeline stages."""

from __future__ import annotations

import argparse
import sys

from .config import apply_overrides, load_config
from .errors import ConfigError, PrerequisiteError, TrainingDiverged
from .pipeline import STAGES, run_stage

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PREREQUISITE = 3
EXIT_NUMERICAL = 4


def _parse_overrides(rest: list[str]) -> list[str]:
    overrides = []
    for item in rest:
        if item.startswith("--") and "=" in item:
            overrides.append(item[2:])
        else:
            raise ConfigError(f"unrecognized argument {item!r}; "
                              "overrides look like --segmenter.lr=0.01")
    return overrides


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="peakseg",
        description="Weakly supervised instance segmentation pipeline on "
                    "synthetic scenes.",
        epilog="Any extra --section.key=value argument overrides that "
               "config field.")
    parser.add_argument("stage", choices=STAGES + ("all",),
                        help="pipeline stage to run")
    parser.add_argument("--config", metavar="PATH",
                        help="YAML file with config overrides")
    parser.add_argument("--out", metavar="DIR",
                        help="run directory (default runs/default)")
    parser.add_argument("--seed", type=int, metavar="N",
                        help="master seed for every stage")
    parser.add_argument("--allow-stale", action="store_true",
                        help="use prerequisite artifacts even if their "
                             "config hash no longer matches")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args, rest = parser.parse_known_args(argv)
    try:
        overrides = _parse_overrides(rest)
        config = load_config(args.config)
        apply_overrides(config, overrides)
        if args.seed is not None:
            config.seed = args.seed
        if args.out is not None:
            config.out = args.out
        config.validate()
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        manifest = run_stage(args.stage, config, allow_stale=args.allow_stale)
    except PrerequisiteError as exc:
        print(f"prerequisite error: {exc}", file=sys.stderr)
        return EXIT_PREREQUISITE
    except TrainingDiverged as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    print(f"[{args.stage}] done (hash {manifest['hash'][:12]}) "
          f"out={config.out}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
