"""Command-line front end: export embeddings, verify a store against a manifest."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .backbones import BACKBONES
from .exporter import ExportError, ExportJob, export_embeddings, verify_store


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="embed-export",
        description="Export frozen-backbone image embeddings to an SVEM store.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("export", help="run the backbone over a manifest")
    p.add_argument("--manifest", required=True, help="series manifest JSONL")
    p.add_argument("--images", required=True, help="root dir: <images>/<scene_id>/<image_id>.jpg")
    p.add_argument("--backbone", default="toy-cnn", choices=sorted(BACKBONES))
    p.add_argument("--out", required=True, help="output .svem path")
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--device", default="cpu")

    p = sub.add_parser("verify", help="check a store against a manifest")
    p.add_argument("--store", required=True)
    p.add_argument("--manifest", required=True)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "export":
            job = ExportJob(
                manifest=Path(args.manifest),
                images_root=Path(args.images),
                backbone=args.backbone,
                output=Path(args.out),
                batch_size=args.batch,
                device=args.device,
            )
            summary = export_embeddings(job)
            print(f"wrote {summary.count} embeddings of dim {summary.dim} "
                  f"to {args.out} (sha256 {summary.sha256[:12]}...)")
            return 0
        report = verify_store(Path(args.store), Path(args.manifest))
        if report.ok:
            print(f"ok: {report.store_count} records, dim {report.store_dim}")
            return 0
        for image_id in report.missing_ids:
            print(f"missing from store: {image_id}")
        for image_id in report.extra_ids:
            print(f"extra in store: {image_id}")
        return 1
    except ExportError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
