"""Export CLI, mirroring the engine's flag conventions and exit codes
(0 ok, 2 schema, 3 io, 4 config)."""

import argparse
import sys

from .backends import ModelLoadError
from .pipeline import ExportConfig, export


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="segmilcbm-export",
        description=(
            "Run concept scoring, grounded detection, and segmentation over an "
            "image folder dataset (one subdirectory per class) and emit rawdet "
            "and bagpack files for the segmilcbm engine."
        ),
    )
    parser.add_argument("--dataset-root", required=True, help="root with one folder per class")
    parser.add_argument("--vocab", required=True, help="concept vocabulary, one name per line")
    parser.add_argument("--out-dir", required=True, help="output directory")
    parser.add_argument("--backend", default="builtin", choices=("builtin", "foundation"),
                        help="model backend [default: builtin]")
    parser.add_argument("--backbone", default="resnet50", choices=("resnet50", "vit-b16"),
                        help="foundation image backbone [default: resnet50]")
    parser.add_argument("--device", default="cpu", help="torch device [default: cpu]")
    parser.add_argument("--dim", type=int, default=64,
                        help="embedding dim of the builtin backend [default: 64]")
    parser.add_argument("--k-top", type=int, default=8,
                        help="concepts kept per image [default: 8]")
    parser.add_argument("--box-threshold", type=float, default=0.3,
                        help="detection score threshold [default: 0.3]")
    parser.add_argument("--tau-iou", type=float, default=0.5,
                        help="IoU threshold for merging [default: 0.5]")
    parser.add_argument("--tau-minpix", type=int, default=100,
                        help="minimum mask area in pixels [default: 100]")
    parser.add_argument("--rho-max", type=float, default=0.5,
                        help="maximum mask area fraction [default: 0.5]")
    parser.add_argument("--max-instances", type=int, default=15,
                        help="bag size cap [default: 15]")
    parser.add_argument("--crop-policy", default="crop", choices=("crop", "image-level"),
                        help="segment clip scores from the masked crop or the whole "
                             "image [default: crop]")
    parser.add_argument("--split", default="train", choices=("train", "val", "test"),
                        help="split tag written to the manifest [default: train]")
    parser.add_argument("--seed", type=int, default=0,
                        help="seed for the builtin backend projections [default: 0]")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    config = ExportConfig(
        dataset_root=args.dataset_root,
        vocab_path=args.vocab,
        out_dir=args.out_dir,
        backend=args.backend,
        backbone=args.backbone,
        device=args.device,
        dim=args.dim,
        k_top=args.k_top,
        box_threshold=args.box_threshold,
        tau_iou=args.tau_iou,
        tau_minpix=args.tau_minpix,
        rho_max=args.rho_max,
        max_instances=args.max_instances,
        crop_policy=args.crop_policy,
        split=args.split,
        seed=args.seed,
    )
    try:
        result = export(config)
    except ModelLoadError as exc:
        print(f"model error: {exc}", file=sys.stderr)
        return 4
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 4
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 3
    for record in result.errors:
        print(f"skipped {record['image_id']}: {record['error']}", file=sys.stderr)
    print(
        f"exported {result.n_images} images ({result.n_errors} skipped) to "
        f"{result.bagpack_path}"
    )
    return 0


if __name__ == "__main__":
    sys.exit(main())
