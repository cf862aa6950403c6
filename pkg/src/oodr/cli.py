"""Command-line entry points for the screening pipeline.

Stages compose through files: manifests and fold tables are TSV, features
travel in the binary feature-file format, scores and traces are TSV, and
reports are JSON. `run` executes the whole pipeline from a JSON config;
the other subcommands expose the individual stages.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import augmenter, evaluator, lof, metric_head, runner, synthetic
from .dataset import (
    Manifest,
    SampleRecord,
    load_manifest,
    materialize_round,
    partition_quarters,
    sample_reference,
    write_fold_assignments,
    write_manifest,
)
from .features import FeatureSet, merge_feature_sets, read_feature_file, write_feature_file
from .runner import load_config
from .templates import TEMPLATE_NAMES


def _add_common_round_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--manifest", required=True)
    p.add_argument("--features", required=True, nargs="+")
    p.add_argument("--template", required=True, choices=sorted(TEMPLATE_NAMES))
    p.add_argument("--round", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--grouping", default="by_image", choices=["by_image", "by_patient"])
    p.add_argument("--reference-size", type=int, default=5000)


def _load_round(args: argparse.Namespace):
    manifest = load_manifest(args.manifest)
    features = merge_feature_sets([read_feature_file(p) for p in args.features])
    spec = runner.resolve_scenario(
        runner.ExperimentConfig(
            manifest=args.manifest,
            features=tuple(args.features),
            template=args.template,
            reference_size=args.reference_size,
            seed=args.seed,
            grouping=args.grouping,
        )
    )
    plan = partition_quarters(manifest, args.seed, args.grouping)
    split = materialize_round(spec, plan, args.round)
    return manifest, features, spec, plan, split


def _cmd_split(args: argparse.Namespace) -> int:
    manifest = load_manifest(args.manifest)
    plan = partition_quarters(manifest, args.seed, args.grouping)
    write_fold_assignments(args.out, plan)
    counts = {q: 0 for q in (1, 2, 3, 4)}
    for q in plan.quarter_of.values():
        counts[q] += 1
    print(
        f"assigned {len(plan.quarter_of)} samples "
        f"({', '.join(f'q{q}={n}' for q, n in counts.items())}), "
        f"dropped {len(plan.dropped)}"
    )
    return 0


def _cmd_augment(args: argparse.Namespace) -> int:
    manifest = load_manifest(args.manifest)
    recs = [
        r
        for r in manifest.by_class.get(args.class_label, [])
        if r.origin == "original"
    ]
    if not recs:
        print(f"error: no original records of class {args.class_label!r}", file=sys.stderr)
        return 1
    root = Path(args.image_root) if args.image_root else Path(".")
    sources = [(r.id, augmenter.load_png(str(root / r.source_path))) for r in recs]
    cfg = augmenter.AugmentPipelineConfig(
        p_flip=args.p_flip,
        p_rotate=args.p_rotate,
        angle_range_deg=(-args.max_angle, args.max_angle),
        fill=args.fill,
        seed=args.seed,
    )
    outputs = augmenter.expand(sources, args.target, cfg)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    by_id = {r.id: r for r in recs}
    new_records = list(manifest.records)
    ops = []
    for out_id, img, applied in outputs:
        rel = f"{out_id}.png"
        augmenter.save_png(str(out_dir / rel), img)
        parent = by_id[applied.parent_id]
        new_records.append(
            SampleRecord(
                id=out_id,
                class_label=parent.class_label,
                source_path=str(out_dir / rel),
                patient_id=parent.patient_id,
                origin="augmented",
                parent_id=parent.id,
            )
        )
        ops.append(applied)
    if args.sidecar:
        augmenter.write_sidecar(args.sidecar, ops)
    write_manifest(args.out_manifest, Manifest(labels=manifest.labels, records=new_records))
    print(f"wrote {len(outputs)} augmented images to {out_dir}")
    return 0


def _head_config(args: argparse.Namespace, input_dim: int, num_classes: int) -> metric_head.HeadConfig:
    overrides = json.loads(args.head) if args.head else {}
    if "hidden_dims" in overrides:
        overrides["hidden_dims"] = tuple(overrides["hidden_dims"])
    overrides.setdefault("seed", args.seed)
    return metric_head.HeadConfig(input_dim=input_dim, num_classes=num_classes, **overrides)


def _cmd_train(args: argparse.Namespace) -> int:
    manifest, features, spec, _, (train_ids, val_ids, _) = _load_round(args)
    classes = spec.train_classes()
    index = {c: i for i, c in enumerate(classes)}
    cfg = _head_config(args, features.dim, len(classes))
    train_set = features.select(train_ids)
    val_set = features.select(val_ids)
    train_y = np.array([index[manifest.class_of(s)] for s in train_ids])
    val_y = np.array([index[manifest.class_of(s)] for s in val_ids])
    model, trace = metric_head.train(train_set.x, train_y, val_set.x, val_y, cfg)
    metric_head.save_checkpoint(args.out, model)
    if args.trace:
        metric_head.write_trace(args.trace, trace)
    print(f"trained {len(trace.train_loss)} epochs, best epoch {trace.best_epoch}")
    return 0


def _cmd_reference(args: argparse.Namespace) -> int:
    manifest, features, spec, _, (train_ids, _, _) = _load_round(args)
    model = metric_head.load_checkpoint(args.checkpoint)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for group in spec.reference_groups:
        ids = sample_reference(
            manifest, group.class_label, group.count, train_ids,
            seed=runner._round_seed(args.seed, args.round),
            include_augmented=args.include_augmented,
        )
        embedded = model.embed_batch(features.select(ids).x)
        path = out_dir / f"ref_{group.name}.feat"
        write_feature_file(str(path), FeatureSet(ids=ids, x=embedded))
        print(f"wrote {len(ids)} reference embeddings to {path}")
    return 0


def _cmd_score(args: argparse.Namespace) -> int:
    from .dataset import is_normal_label

    manifest, features, spec, _, (_, _, test_ids) = _load_round(args)
    model = metric_head.load_checkpoint(args.checkpoint)
    groups = []
    for group_spec in spec.reference_groups:
        path = Path(args.refs_dir) / f"ref_{group_spec.name}.feat"
        ref = read_feature_file(str(path))
        groups.append(lof.build_reference(ref.x, args.k, name=group_spec.name))
    test_set = features.select(test_ids)
    embedded = FeatureSet(ids=list(test_set.ids), x=model.embed_batch(test_set.x))
    true_labels = {
        s: "normal" if is_normal_label(manifest.class_of(s)) else "abnormal"
        for s in test_ids
    }
    diseases = {
        s: manifest.class_of(s) if true_labels[s] == "abnormal" else "-" for s in test_ids
    }
    records = lof.score_batch(groups, embedded, true_labels, diseases, args.threshold)
    lof.write_scores(args.out, records, [g.name for g in groups])
    print(f"scored {len(records)} test samples against {len(groups)} groups")
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    records = lof.read_scores(args.scores)
    report = evaluator.per_disease_report(records, args.threshold)
    if args.out:
        evaluator.write_report(args.out, report)
    if args.roc:
        curve, _ = evaluator.roc_auc(records)
        evaluator.write_roc(args.roc, curve)
    print(f"auc {report.auc:.7f}")
    print(f"fpr_at_tpr1 {report.fpr_at_tpr1:.7f}")
    return 0


def _cmd_run(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    result = runner.run(cfg)
    print(
        f"{result.scenario.name}: {len(result.rounds)} rounds, "
        f"pooled auc {result.pooled.auc:.7f}, "
        f"fpr_at_tpr1 {result.pooled.fpr_at_tpr1:.7f}"
    )
    print(f"artifacts under {cfg.output_dir}")
    return 0


def _cmd_report(args: argparse.Namespace) -> int:
    path = Path(args.run_dir) / "report.json"
    with open(path, "r", encoding="utf-8") as fh:
        report = json.load(fh)
    print(f"scenario {report['provenance']['scenario']} "
          f"({report['provenance']['rounds']} rounds)")
    print(f"pooled   auc {report['auc']:.7f}  fpr_at_tpr1 {report['fpr_at_tpr1']:.7f}")
    avg = report["averaged"]
    print(f"averaged auc {avg['auc']:.7f}  fpr_at_tpr1 {avg['fpr_at_tpr1']:.7f}")
    for name, stats in sorted(report.get("per_disease", {}).items()):
        print(f"  vs {name}: auc {stats['auc']:.7f}  fpr_at_tpr1 {stats['fpr_at_tpr1']:.7f}")
    return 0


def _cmd_synth(args: argparse.Namespace) -> int:
    labels = tuple(s.strip() for s in args.labels.split(",") if s.strip())
    cfg = synthetic.SyntheticConfig(
        clusters=tuple(
            synthetic.ClusterSpec(label=lab, count=args.count) for lab in labels
        ),
        dim=args.dim,
        separation=args.separation,
        seed=args.seed,
    )
    manifest, feats = synthetic.make_synthetic(cfg)
    write_manifest(args.out_manifest, manifest)
    write_feature_file(args.out_features, feats)
    print(f"wrote {len(feats)} samples across {len(labels)} clusters")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="oodr",
        description="Normal-vs-abnormal screening pipeline: split, train, score, evaluate.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("split", help="assign every sample to one of four quarters")
    p.add_argument("--manifest", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--grouping", default="by_image", choices=["by_image", "by_patient"])
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_split)

    p = sub.add_parser("augment", help="expand one class with flips and rotations")
    p.add_argument("--manifest", required=True)
    p.add_argument("--class", dest="class_label", required=True)
    p.add_argument("--target", type=int, required=True)
    p.add_argument("--image-root", default=None)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--out-manifest", required=True)
    p.add_argument("--sidecar", default=None)
    p.add_argument("--p-flip", type=float, default=0.8)
    p.add_argument("--p-rotate", type=float, default=0.7)
    p.add_argument("--max-angle", type=float, default=10.0)
    p.add_argument("--fill", default="black", choices=["black", "edge"])
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_augment)

    p = sub.add_parser("train", help="train the embedding head for one round")
    _add_common_round_args(p)
    p.add_argument("--head", default=None, help="JSON dict of head config overrides")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--trace", default=None, help="training trace TSV path")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("reference", help="embed reference groups for one round")
    _add_common_round_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--include-augmented", action="store_true")
    p.set_defaults(func=_cmd_reference)

    p = sub.add_parser("score", help="score the round's test set against references")
    _add_common_round_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--refs-dir", required=True)
    p.add_argument("--k", type=int, default=20)
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_score)

    p = sub.add_parser("eval", help="evaluate a score file")
    p.add_argument("--scores", required=True)
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--out", default=None, help="report JSON path")
    p.add_argument("--roc", default=None, help="ROC points TSV path")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("run", help="run a full scenario from a JSON config")
    p.add_argument("--config", required=True)
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("report", help="summarize a finished run directory")
    p.add_argument("--run-dir", required=True)
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("synth", help="generate a synthetic manifest + feature file")
    p.add_argument("--labels", default="normal,disease_a,disease_b,disease_c")
    p.add_argument("--count", type=int, default=500)
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--separation", type=float, default=10.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-manifest", required=True)
    p.add_argument("--out-features", required=True)
    p.set_defaults(func=_cmd_synth)

    return parser


def cli(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # surface a diagnostic, not a traceback
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli(sys.argv[1:]))


if __name__ == "__main__":
    main()
