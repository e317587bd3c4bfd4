"""Command-line entry: convmetric-export --source mini --out-dir exported/"""
from __future__ import annotations

import argparse
import sys

from .export import export_weights
from .writer import ExportError


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="convmetric-export",
        description="Convert a conv feature extractor to the portable PAMW weight format",
    )
    parser.add_argument("--source", default="mini",
                        help="bundled source (mini, mini-maxpool) or architecture name "
                             "used with --backbone-weights")
    parser.add_argument("--backbone-weights", default=None,
                        help="torch state-dict file for a named architecture")
    parser.add_argument("--calib", default=None,
                        help="torch file with per-stage calibration vectors (default all-ones)")
    parser.add_argument("--out-dir", required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        record = export_weights(args.source, args.out_dir,
                                backbone_weights=args.backbone_weights, calib=args.calib)
    except ExportError as exc:
        print(f"refused: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    print(f"source={record['source']} distance={record['distance']} "
          f"crc32={record['crc32']} tolerance={record['tolerance']}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
