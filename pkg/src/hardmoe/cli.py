"""Command line entry point: ``hardmoe <stage> --config <path>``."""

from __future__ import annotations

import argparse
import logging
import sys

from .config import load_config
from .errors import (ConfigError, DatasetValidationError, DependencyError, FormatError,
                     HardMoeError, SamplerError, ShapeError, TrainingError, UnsupportedModeError)
from .pipeline import STAGES, default_sequence, run_stage

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DEPENDENCY = 3
EXIT_TRAINING = 4
EXIT_IO = 5

log = logging.getLogger("hardmoe")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hardmoe", description="Hard mixture-of-experts pipeline.")
    p.add_argument("stage", choices=STAGES + ("all",),
                   help="stage to run; 'all' runs the full sequence implied by the config")
    p.add_argument("--config", required=True, help="YAML or JSON pipeline config")
    p.add_argument("--force", action="store_true", help="re-run even if the stage is up to date")
    p.add_argument("--workers", type=int, default=None,
                   help="concurrent expert trainers (default: min(K, CPUs))")
    p.add_argument("--seed", type=int, default=None, help="override the master seed")
    p.add_argument("-q", "--quiet", action="store_true")
    return p


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, DependencyError):
        return EXIT_DEPENDENCY
    if isinstance(exc, (TrainingError, SamplerError)):
        return EXIT_TRAINING
    if isinstance(exc, (FormatError, DatasetValidationError, OSError)):
        return EXIT_IO
    if isinstance(exc, (ShapeError, UnsupportedModeError)):
        return EXIT_CONFIG
    return 1


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.workers is not None and args.workers < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = load_config(args.config, seed=args.seed)
        stages = default_sequence(cfg) if args.stage == "all" else [args.stage]
        for name in stages:
            res = run_stage(name, cfg, force=args.force, workers=args.workers)
            state = "skipped (up to date)" if res.skipped else f"done in {res.record['wall_time_s']:.1f}s"
            print(f"{name}: {state}")
    except (HardMoeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exit_code(exc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
