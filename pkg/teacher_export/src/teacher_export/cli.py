"""Command line entry point for the feature exporter."""

from __future__ import annotations

import argparse
import sys

from .encoder import ModelUnavailableError, load_model
from .exporter import ExportDataError, export_features
from .teacherfile import TeacherFileError


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="teacher-export")
    sp = ap.add_subparsers(dest="cmd", required=True)
    ex = sp.add_parser("export", help="export frozen encoder features")
    ex.add_argument("--images", required=True, help="image directory")
    ex.add_argument("--model", required=True,
                    help="model id, e.g. local-frozen-0")
    ex.add_argument("--out", required=True, help="output TeacherFile path")
    ex.add_argument("--resolution", type=int, default=32)
    ex.add_argument("--patch-size", type=int, default=8)
    ex.add_argument("--dim", type=int, default=32)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        model = load_model(args.model, args.patch_size, args.dim)
        manifest = export_features(args.images, model, args.model, args.out,
                                   args.resolution)
    except (ModelUnavailableError, TeacherFileError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except ExportDataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    print(f"wrote {len(manifest.images)} records to {args.out} "
          f"(grid {manifest.patch_grid}x{manifest.patch_grid}, "
          f"dim {manifest.teacher_dim})")
    return 0


if __name__ == "__main__":
    sys.exit(main())
