"""export-fc6: dump VGG19 fc6 activations for an image directory to SRFT."""

from __future__ import annotations

import argparse
import sys

from .export import ExportError, ExportJob, export_features


def build_parser():
    parser = argparse.ArgumentParser(
        prog="export-fc6",
        description="Export VGG19 fc6 activations for every image in a "
                    "directory into an SRFT feature file plus a JSON sidecar.",
    )
    parser.add_argument("--images", required=True, help="input image directory")
    parser.add_argument("--out", required=True, help="output .srft path")
    parser.add_argument("--batch", type=int, default=8)
    parser.add_argument("--pre-relu", action="store_true",
                        help="export raw fc6 activations instead of post-ReLU")
    parser.add_argument("--weights", default=None,
                        help="local VGG19 state-dict (.pth); default tries the "
                             "torchvision pretrained cache/download")
    parser.add_argument("--random-init", action="store_true",
                        help="seeded random weights (plumbing tests only)")
    parser.add_argument("--seed", type=int, default=0,
                        help="seed used with --random-init")
    parser.add_argument("--device", default="cpu")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    job = ExportJob(
        image_dir=args.images,
        output_path=args.out,
        batch_size=args.batch,
        post_relu=not args.pre_relu,
        weights=args.weights,
        random_init_seed=args.seed if args.random_init else None,
        device=args.device,
    )
    try:
        result = export_features(job)
    except ExportError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"wrote {result.n} x {result.d} features to {args.out} "
          f"({len(result.skipped)} skipped)")
    return 0


def console_main():
    sys.exit(main())


if __name__ == "__main__":
    sys.exit(main())
