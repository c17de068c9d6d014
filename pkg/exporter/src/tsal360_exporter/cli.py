"""Command line for offline feature extraction.

Example:
    tsal360-export export --images list.txt --text "the red car" \
        --viewports 18 --out feats.tsft

`list.txt` holds one tangent-image path per line, frame-major: all T
viewport patches of the first frame, then the next frame, and so on.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .export import ExportSpec, run_export

logger = logging.getLogger("tsal360-export")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tsal360-export")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("export", help="extract features from tangent images and text")
    p.add_argument("--images", required=True, help="file listing F*T image paths, frame-major")
    p.add_argument("--text", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--viewports", type=int, required=True, help="patches per frame (T)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--weights", help="optional state-dict checkpoint to load")
    p.add_argument("--batch-size", type=int, default=16)
    p.set_defaults(func=cmd_export)
    return parser


def cmd_export(args) -> int:
    listing = Path(args.images)
    paths = [ln.strip() for ln in listing.read_text().splitlines() if ln.strip()]
    if not paths:
        raise ValueError(f"{listing} lists no images")
    base = listing.parent
    resolved = [str(p if Path(p).is_absolute() else base / p) for p in paths]
    spec = ExportSpec(
        image_paths=resolved,
        text=args.text,
        out_path=args.out,
        viewports=args.viewports,
        seed=args.seed,
        weights_path=args.weights,
        batch_size=args.batch_size,
    )
    shapes = run_export(spec)
    for name, shape in shapes.items():
        logger.info("%s: %s", name, shape)
    logger.info("wrote %s", args.out)
    return 0


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:
        logger.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
