"""Command line for batch feature extraction."""

import argparse
import glob
import logging
import os
import sys

from .extract import DEFAULT_MAX_SIDE, ExtractionSpec, extract

log = logging.getLogger("blcf-extract")

IMAGE_EXTS = (".png", ".jpg", ".jpeg", ".bmp")


def gather_images(paths: list[str]) -> list[str]:
    images = []
    for path in paths:
        if os.path.isdir(path):
            for ext in IMAGE_EXTS:
                images.extend(glob.glob(os.path.join(path, "*" + ext)))
        else:
            images.append(path)
    return sorted(images)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="blcf-extract", description=__doc__)
    parser.add_argument("--images", nargs="+", required=True, help="image files or directories")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--max-side", type=int, default=DEFAULT_MAX_SIDE)
    parser.add_argument("--layer", default="conv5_1")
    parser.add_argument(
        "--weights",
        default="imagenet",
        help="'imagenet', 'random' (seeded, for testing), or a state-dict path",
    )
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--allow-upscale", action="store_true")
    parser.add_argument("--saliency-dir", default=None, help="externally produced maps to adopt")
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)

    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    spec = ExtractionSpec(
        images=gather_images(args.images),
        output_dir=args.out,
        max_side=args.max_side,
        layer=args.layer,
        weights=args.weights,
        seed=args.seed,
        allow_upscale=args.allow_upscale,
        saliency_dir=args.saliency_dir,
    )
    try:
        entries, manifest_path = extract(spec)
    except (RuntimeError, ValueError, OSError) as exc:
        log.error("%s", exc)
        return 1
    log.info("wrote %d manifest entries to %s", len(entries), manifest_path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
