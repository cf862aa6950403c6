"""Command line entry point.

octfeat extract --manifest m.tsv --out f.feat [--weights imagenet|none|PATH]
    [--finetune --train-manifest T --val-manifest V --epochs 3]

With --finetune the backbone is first trained end to end on the labeled
manifests, then the tuned trunk embeds the extraction manifest.
"""

from __future__ import annotations

import argparse
import sys

from .backbones import ExtractorConfig
from .extractor import extract
from .finetune import finetune


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="octfeat", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    ex = sub.add_parser("extract", help="embed manifest images into a FEAT1 file")
    ex.add_argument("--manifest", required=True)
    ex.add_argument("--out", required=True)
    ex.add_argument("--backbone", default="densenet201", choices=["densenet201"])
    ex.add_argument("--weights", default="imagenet", help="imagenet, none, or a state-dict path")
    ex.add_argument("--input-size", type=int, default=224)
    ex.add_argument("--batch-size", type=int, default=16)
    ex.add_argument("--device", default="cpu")
    ex.add_argument("--seed", type=int, default=0)
    ex.add_argument("--finetune", action="store_true")
    ex.add_argument("--train-manifest")
    ex.add_argument("--val-manifest")
    ex.add_argument("--epochs", type=int, default=3)
    ex.add_argument("--alpha", type=float, default=16.0)
    ex.add_argument("--lr", type=float, default=0.001)
    ex.add_argument("--checkpoint-dir")
    return parser


def cli(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = ExtractorConfig(
            manifest=args.manifest,
            out=args.out,
            backbone=args.backbone,
            weights=args.weights,
            input_size=args.input_size,
            batch_size=args.batch_size,
            device=args.device,
            fine_tune=args.finetune,
            seed=args.seed,
        )
        trunk = None
        if args.finetune:
            if not args.train_manifest or not args.val_manifest:
                raise ValueError("--finetune needs --train-manifest and --val-manifest")
            result = finetune(
                cfg,
                args.train_manifest,
                args.val_manifest,
                epochs=args.epochs,
                alpha=args.alpha,
                lr=args.lr,
                checkpoint_dir=args.checkpoint_dir,
            )
            print(f"finetuned {args.epochs} epochs, best epoch {result.best_epoch}")
            trunk = result.model.backbone
        out = extract(cfg, backbone=trunk)
        for sid, reason in out.excluded:
            print(f"excluded {sid}: {reason}", file=sys.stderr)
        print(f"wrote {len(out.ids)} rows of dim {out.dim} to {out.path}")
        return 0
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli())


if __name__ == "__main__":
    main()
