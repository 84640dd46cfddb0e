"""Command line for dataset export."""

from __future__ import annotations

import argparse
import sys

from .encoders import EncoderError
from .export import ExportError, ExportSpec, export


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mixad-export")
    p.add_argument("--root", required=True, help="dataset root (MVTec-style layout)")
    p.add_argument("--out", required=True, help="output directory for bundles")
    p.add_argument("--classes", default=None, help="comma list; default: autodiscover")
    p.add_argument("--encoder", default="proj14-96",
                   help="proj<patch>-<dim> or dinov2-vitb14")
    p.add_argument("--resize", type=int, default=448)
    p.add_argument("--crop", type=int, default=392)
    p.add_argument("--layers", default=None,
                   help="comma list of encoder blocks to export (dinov2 only)")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    spec = ExportSpec(
        dataset_root=args.root,
        out_dir=args.out,
        classes=args.classes.split(",") if args.classes else None,
        resize=args.resize,
        crop=args.crop,
        encoder_id=args.encoder,
        layer_indices=[int(v) for v in args.layers.split(",")] if args.layers else [],
    )
    try:
        manifest = export(spec)
    except (ExportError, EncoderError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"manifest written to {manifest}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
