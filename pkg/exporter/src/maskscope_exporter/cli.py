"""Command line wrapper around the export job."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .capture import LayerNotFound
from .export import ExportJob, ModelSpec, run_export


def parse_model_spec(text: str) -> ModelSpec:
    """NAME=CKPT:LAYER, splitting on the last colon so paths survive."""
    name, eq, rest = text.partition("=")
    ckpt, colon, layer = rest.rpartition(":")
    if not eq or not colon or not name or not ckpt or not layer:
        raise argparse.ArgumentTypeError(
            f"expected NAME=CKPT:LAYER, got '{text}'"
        )
    return ModelSpec(name=name, checkpoint=Path(ckpt), layer=layer)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="maskscope-export",
        description="Export classifier activations/gradients and segmentation maps.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("export", help="run every model over an image folder")
    p.add_argument("--images", type=Path, required=True,
                   help="folder with one subfolder per class")
    p.add_argument("--model", type=parse_model_spec, action="append", required=True,
                   metavar="NAME=CKPT:LAYER",
                   help="classifier checkpoint and conv layer to tap (repeatable)")
    p.add_argument("--seg", type=Path, required=True,
                   help="150-class segmentation model checkpoint")
    p.add_argument("--out", type=Path, required=True, help="output folder")
    p.add_argument("--device", default="cpu")
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--gradient-from", choices=("predicted", "label"), default="predicted",
                   help="class logit to backpropagate")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    job = ExportJob(
        images=args.images,
        models=args.model,
        segmentation=args.seg,
        out=args.out,
        device=args.device,
        batch_size=args.batch_size,
        gradient_from=args.gradient_from,
    )
    try:
        manifest = run_export(job)
    except (LayerNotFound, ValueError, TypeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"manifest written to {manifest}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
