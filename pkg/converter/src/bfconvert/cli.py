"""Command line front end: ``bfconvert model`` and ``bfconvert dataset``."""

import argparse
import sys

from .archives import ConversionError
from .datasetconv import convert_dataset
from .modelconv import convert_model


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bfconvert",
        description="Convert third-party body model archives and scan "
        "directories into the formats the fitting package reads.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    model = sub.add_parser("model", help="convert a .npz/.pkl model archive")
    model.add_argument("source", help="archive to convert")
    model.add_argument("out", help="output container path")
    model.add_argument("--manifest", help="also write the conversion manifest JSON here")

    dataset = sub.add_parser("dataset", help="crawl a scan directory into a manifest")
    dataset.add_argument("scan_dir", help="directory of .ply/.obj meshes")
    dataset.add_argument("out", help="output manifest path (JSON lines)")
    dataset.add_argument("--up", choices=("y", "z"), default="y",
                         help="up axis of the source meshes (default y)")
    dataset.add_argument("--manifest", help="also write the conversion manifest JSON here")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "model":
            manifest = convert_model(args.source, args.out)
            print(f"wrote {args.out} ({manifest.variant}); "
                  f"sha256 {next(iter(manifest.checksums.values()))[:12]}")
        else:
            manifest = convert_dataset(args.scan_dir, args.out, up=args.up)
            print(f"wrote {args.out}: {manifest.entries} entries, "
                  f"{len(manifest.warnings)} warnings")
        for w in manifest.warnings:
            print(f"  warning: {w}", file=sys.stderr)
        if args.manifest:
            with open(args.manifest, "w") as f:
                f.write(manifest.to_json() + "\n")
    except ConversionError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
