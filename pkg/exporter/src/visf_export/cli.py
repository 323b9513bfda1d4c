"""CLI: visf-export --images DIR --out DIR --model ID --batch N."""

from __future__ import annotations

import argparse
import logging
import sys

from .export import export


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="visf-export",
        description="Export vision-tower features and activation stacks to VISF files",
    )
    parser.add_argument("--images", required=True, help="directory of input images")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument(
        "--model",
        default="Salesforce/blip-image-captioning-base",
        help="pretrained checkpoint id, or untrained:<layers> for a seeded random tower",
    )
    parser.add_argument("--batch", type=int, default=8)
    parser.add_argument("--seed", type=int, default=0, help="init seed for untrained towers")
    args = parser.parse_args(argv)

    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        manifest = export(args.images, args.out, args.model, batch_size=args.batch, seed=args.seed)
    except ValueError as exc:
        print(f"visf-export: {exc}", file=sys.stderr)
        return 1
    print(f"exported {len(manifest['images'])} images to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
