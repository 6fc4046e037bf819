"""Command line entry point.

Subcommands select which pipeline stages run; every flag applies to all
of them. Exit codes: 0 success, 2 bad configuration, 3 input data
failed validation, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .embedding import NumericError
from .pipeline import (
    ConfigError,
    DataValidationError,
    RunConfig,
    StageError,
    exit_code_for,
    run,
)
from .tensor_io import ManifestError, TensorFormatError

# Which stages each subcommand runs. Everything needs masks first.
SUBCOMMANDS = {
    "masks": ("masks", "explanations"),
    "embed": ("masks", "embedding"),
    "objstats": ("masks", "objstats"),
    "ar": ("masks", "ar"),
    "report": ("masks", "explanations", "embedding", "objstats", "ar", "report"),
    "all": ("masks", "explanations", "embedding", "objstats", "ar", "report"),
}

HELP = {
    "masks": "compute weighted masks and visual explanations",
    "embed": "reduce masks with PCA and embed them in 2-D",
    "objstats": "per-object pixel coverage ratios and selection",
    "ar": "average residual between every pair of models",
    "report": "run any missing stages and render figures",
    "all": "run the whole pipeline end to end",
}


def _add_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--manifest", type=Path, required=True, help="dataset manifest JSON")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--threshold", type=float, default=0.5, help="mask threshold in [0, 1]")
    p.add_argument("--seed", type=int, default=0, help="seed for every random choice")
    p.add_argument("--perplexity", type=float, default=30.0)
    p.add_argument("--iterations", type=int, default=1000)
    p.add_argument("--min-avg-pixels", type=float, default=100.0,
                   help="object selection bound on average pixels per image")
    p.add_argument("--models", type=str, default=None,
                   help="comma-separated model subset (default: all in manifest)")
    p.add_argument("--thumbnail-cap", type=int, default=500,
                   help="max thumbnails in the explanation scatter")
    p.add_argument("--names", type=Path, default=None,
                   help="object names file, one 'id name' line per object")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="maskscope",
        description="Weighted-mask analysis over exported activations and gradients.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, stages in SUBCOMMANDS.items():
        p = sub.add_parser(name, help=HELP[name])
        _add_flags(p)
        p.set_defaults(stages=stages)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    models = tuple(m for m in args.models.split(",") if m) if args.models else None
    cfg = RunConfig(
        manifest=args.manifest,
        out=args.out,
        threshold=args.threshold,
        seed=args.seed,
        perplexity=args.perplexity,
        iterations=args.iterations,
        min_avg_pixels=args.min_avg_pixels,
        models=models,
        stages=args.stages,
        thumbnail_cap=args.thumbnail_cap,
        names_path=args.names,
    )
    try:
        report = run(cfg)
    except (
        ConfigError,
        StageError,
        ManifestError,
        TensorFormatError,
        DataValidationError,
        NumericError,
        ValueError,
        OSError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exit_code_for(exc)
    for stage, status in report.stage_status.items():
        print(f"{stage}: {status}")
    print(f"outputs in {report.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
