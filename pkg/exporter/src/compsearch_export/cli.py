import argparse
import logging
import sys
from pathlib import Path

from .export import ExportError, ExportJob, export


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="compsearch-export",
        description="Export backbone features and a manifest for a gallery")
    parser.add_argument("--images", required=True, type=Path,
                        help="folder with the image files")
    parser.add_argument("--annotations", required=True, type=Path,
                        help="COCO instances JSON")
    parser.add_argument("--out", required=True, type=Path,
                        help="output folder (features/, manifest.jsonl)")
    parser.add_argument("--layer", type=int, default=4,
                        help="residual stage to cut at (default 4: 7x7x2048)")
    parser.add_argument("--weights", choices=("pretrained", "random"),
                        default="pretrained")
    parser.add_argument("--batch-size", type=int, default=8)
    parser.add_argument("--seed", type=int, default=0,
                        help="init seed when --weights random")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    try:
        result = export(ExportJob(args.images, args.annotations, args.out,
                                  layer=args.layer, weights=args.weights,
                                  batch_size=args.batch_size, seed=args.seed))
    except ExportError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"exported {len(result.exported)} images to {result.manifest}"
          + (f", skipped {len(result.skipped)}" if result.skipped else ""))
    return 0


if __name__ == "__main__":
    sys.exit(main())
