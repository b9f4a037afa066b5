"""Command line entry point for patch feature extraction."""

from __future__ import annotations

import argparse
import sys

from .errors import PatchfeatError
from .extract import MODEL_NAMES, WEIGHT_MODES, extract


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="patchfeat",
        description="Cut spot-centered patches from a slide image and emit "
        "frozen CNN features as BMAT plus a manifest",
    )
    parser.add_argument("--image", required=True, help="slide image (PNG/JPEG/TIFF)")
    parser.add_argument("--spots", required=True, help="CSV with header spot_id,x,y")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--model", choices=MODEL_NAMES, default="resnet50")
    parser.add_argument(
        "--weights", choices=WEIGHT_MODES, default="seeded",
        help="seeded: reproducible random init (offline); pretrained: ImageNet",
    )
    parser.add_argument("--seed", type=int, default=0, help="weight init seed")
    parser.add_argument("--patch-size", type=int, default=224)
    parser.add_argument(
        "--spot-px", type=int, default=None,
        help="spot footprint in pixels when it differs from --patch-size; "
        "patches are then resized",
    )
    parser.add_argument("--batch-size", type=int, default=16)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    try:
        summary = extract(
            image_path=args.image,
            spots_path=args.spots,
            out_dir=args.out,
            model_name=args.model,
            weights=args.weights,
            seed=args.seed,
            patch_size=args.patch_size,
            spot_px=args.spot_px,
            batch_size=args.batch_size,
        )
    except PatchfeatError as exc:
        message = " ".join(str(exc).split())
        print(f"patchfeat: error [{type(exc).__name__}] {message}", file=sys.stderr)
        return exc.exit_code
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"patchfeat: error [io] {exc}", file=sys.stderr)
        return 3
    for spot_id in summary["skipped"]:
        print(f"warning: spot {spot_id} out of bounds, skipped", file=sys.stderr)
    print(
        f"extract wrote {summary['n_rows']} x {summary['d_img']} features "
        f"to {summary['manifest']}"
    )
    return 0


if __name__ == "__main__":
    sys.exit(main())
