"""``phenoflow`` command-line entry point."""

from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline as pl
from .errors import PhenoflowError

COMMANDS = ("fit", "analyze", "train", "explain", "synth", "all")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="phenoflow",
        description="Grassland phenology from NDVI: curve fitting, soil-warming regression, MLP + SHAP.",
        epilog="Exit codes: 0 ok, 1 config/usage, 2 input, 3 too few usable fits, "
        "4 training diverged, 5 SHAP additivity violated, 6 internal error.",
    )
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--seed", type=int, help="master seed (overrides config)")
    parser.add_argument("--out-dir", help="output directory (overrides config)")
    parser.add_argument(
        "--target",
        choices=pl.TARGETS,
        help="phenology target for train/explain; default: all targets in the config",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def load_config(args) -> pl.PipelineConfig:
    try:
        cfg = pl.PipelineConfig.from_json(args.config) if args.config else pl.PipelineConfig()
    except (OSError, ValueError, TypeError) as exc:
        raise pl.PipelineExit(pl.EXIT_CONFIG, f"cannot load config {args.config}: {exc}") from None
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out_dir is not None:
        cfg.out_dir = args.out_dir
    cfg.validate()
    return cfg


def run(args) -> int:
    cfg = load_config(args)
    targets = [args.target] if args.target else list(cfg.targets)
    if args.command == "synth":
        return pl.cmd_synth(cfg)
    if args.command == "fit":
        return pl.cmd_fit(cfg)
    if args.command == "analyze":
        return pl.cmd_analyze(cfg)
    if args.command == "train":
        for t in targets:
            pl.cmd_train(cfg, t)
        return pl.EXIT_OK
    if args.command == "explain":
        for t in targets:
            pl.cmd_explain(cfg, t)
        return pl.EXIT_OK
    if args.target:
        cfg.targets = targets
    return pl.cmd_all(cfg)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return run(args)
    except pl.PipelineExit as exc:
        print(f"phenoflow: error: {exc}", file=sys.stderr)
        return exc.code
    except PhenoflowError as exc:
        print(f"phenoflow: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return pl.EXIT_INTERNAL
    except Exception as exc:  # pragma: no cover - last-resort mapping
        print(f"phenoflow: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return pl.EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
