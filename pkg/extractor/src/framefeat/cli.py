"""CLI wrapper around the extractor; flags mirror ExtractorConfig."""

import argparse
import sys

from .extract import ExtractError, ExtractorConfig, extract


def build_parser():
    parser = argparse.ArgumentParser(
        prog="framefeat",
        description="Extract frozen-CNN frame features from gameplay video "
                    "or frame-image directories into an ENGFEAT1 container")
    parser.add_argument("input", help="video file or directory of frame images")
    parser.add_argument("--out", required=True, help="output feature file")
    parser.add_argument("--fps", type=float, default=3.0)
    parser.add_argument("--layout", choices=("maps", "vectors"), default="vectors")
    parser.add_argument("--backbone", default="resnet18-imagenet",
                        choices=("resnet18-imagenet", "resnet18-random"))
    parser.add_argument("--source-fps", type=float, default=None,
                        help="frame rate of an image directory (default: --fps)")
    parser.add_argument("--batch-size", type=int, default=16)
    parser.add_argument("--seed", type=int, default=0,
                        help="weight seed for the resnet18-random backbone")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = ExtractorConfig(input_path=args.input, output_path=args.out,
                                 fps=args.fps, layout=args.layout,
                                 backbone=args.backbone, source_fps=args.source_fps,
                                 batch_size=args.batch_size, seed=args.seed)
        path = extract(config)
    except (ExtractError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"wrote {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
