"""End-to-end scenario execution: split, train, reference, score, evaluate.

A run is a pure function of (manifest, features, config): quartering,
head training, reference sampling, and scoring all derive their randomness
from the config seed, and every artifact is persisted under the output
directory with a config hash for provenance. Rounds are independent and
may execute in parallel under the OODR_THREADS cap without changing any
result.
"""

from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import (
    Manifest,
    QuarterPlan,
    ReferenceGroupSpec,
    ScenarioSpec,
    is_normal_label,
    load_manifest,
    materialize_round,
    partition_quarters,
    sample_reference,
    write_fold_assignments,
)
from .evaluator import EvalReport, per_disease_report, roc_auc, write_report, write_roc
from .features import FeatureSet, MissingFeatureError, merge_feature_sets, read_feature_file
from .lof import ReferenceGroup, ScoreRecord, build_reference, score_batch, write_scores
from .metric_head import (
    HeadConfig,
    MetricHeadModel,
    TrainingTrace,
    save_checkpoint,
    train,
    write_trace,
)
from .templates import TEMPLATE_NAMES, make_template


class ConfigError(ValueError):
    pass


class LabelMismatchError(ValueError):
    """Scenario references classes the manifest does not declare."""


@dataclass(frozen=True)
class ExperimentConfig:
    manifest: str
    features: tuple[str, ...]
    template: str | None = None
    scenario: dict | None = None
    head: dict = field(default_factory=dict)
    lof_k: int = 20
    reference_size: int = 5000
    seed: int = 0
    grouping: str = "by_image"
    threshold: float | None = None
    include_augmented_references: bool = False
    output_dir: str = "out"

    def __post_init__(self) -> None:
        if (self.template is None) == (self.scenario is None):
            raise ConfigError("config needs exactly one of 'template' or 'scenario'")
        if self.template is not None and self.template not in TEMPLATE_NAMES:
            raise ConfigError(
                f"unknown template {self.template!r}; known: {sorted(TEMPLATE_NAMES)}"
            )
        if self.lof_k < 1:
            raise ConfigError(f"lof_k must be >= 1, got {self.lof_k}")

    def to_dict(self) -> dict:
        return {
            "manifest": self.manifest,
            "features": list(self.features),
            "template": self.template,
            "scenario": self.scenario,
            "head": dict(self.head),
            "lof_k": self.lof_k,
            "reference_size": self.reference_size,
            "seed": self.seed,
            "grouping": self.grouping,
            "threshold": self.threshold,
            "include_augmented_references": self.include_augmented_references,
            "output_dir": self.output_dir,
        }

    def content_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


def load_config(path: str) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    return config_from_dict(raw)


def config_from_dict(raw: dict) -> ExperimentConfig:
    known = {
        "manifest", "features", "template", "scenario", "head", "lof_k",
        "reference_size", "seed", "grouping", "threshold",
        "include_augmented_references", "output_dir",
    }
    extra = set(raw) - known
    if extra:
        raise ConfigError(f"unknown config keys: {sorted(extra)}")
    if "manifest" not in raw or "features" not in raw:
        raise ConfigError("config requires 'manifest' and 'features'")
    feats = raw["features"]
    if isinstance(feats, str):
        feats = [feats]
    return ExperimentConfig(
        manifest=raw["manifest"],
        features=tuple(feats),
        template=raw.get("template"),
        scenario=raw.get("scenario"),
        head=dict(raw.get("head", {})),
        lof_k=int(raw.get("lof_k", 20)),
        reference_size=int(raw.get("reference_size", 5000)),
        seed=int(raw.get("seed", 0)),
        grouping=raw.get("grouping", "by_image"),
        threshold=raw.get("threshold"),
        include_augmented_references=bool(raw.get("include_augmented_references", False)),
        output_dir=raw.get("output_dir", "out"),
    )


def scenario_from_dict(raw: dict) -> ScenarioSpec:
    """Inline scenario: sections as [label, [quarters...]] pairs."""

    def section(key: str) -> tuple[tuple[str, frozenset[int]], ...]:
        return tuple(
            (str(label), frozenset(int(q) for q in quarters))
            for label, quarters in raw.get(key, [])
        )

    groups = []
    for g in raw.get("reference_groups", []):
        if isinstance(g, dict):
            groups.append(
                ReferenceGroupSpec(g["name"], g.get("class", g.get("class_label", g["name"])), int(g["count"]))
            )
        else:
            name, class_label, count = g
            groups.append(ReferenceGroupSpec(str(name), str(class_label), int(count)))
    return ScenarioSpec(
        name=raw.get("name", "inline"),
        train=section("train"),
        validation=section("validation"),
        test=section("test"),
        reference_groups=tuple(groups),
        rotation=raw.get("rotation", "fourfold"),
    )


def resolve_scenario(cfg: ExperimentConfig) -> ScenarioSpec:
    if cfg.template is not None:
        return make_template(cfg.template, reference_size=cfg.reference_size)
    return scenario_from_dict(cfg.scenario)


@dataclass
class RoundResult:
    round_index: int
    model: MetricHeadModel
    trace: TrainingTrace
    records: list[ScoreRecord]
    report: EvalReport
    group_names: list[str]


@dataclass
class RunResult:
    scenario: ScenarioSpec
    rounds: list[RoundResult]
    pooled: EvalReport
    averaged: dict
    config_hash: str
    seed: int
    version: str = __version__

    def report_dict(self) -> dict:
        out = self.pooled.to_dict()
        out["rounds"] = [r.report.to_dict() for r in self.rounds]
        out["averaged"] = self.averaged
        out["provenance"] = {
            "config_hash": self.config_hash,
            "seed": self.seed,
            "version": self.version,
            "scenario": self.scenario.name,
            "rounds": len(self.rounds),
        }
        return out


def _round_seed(master: int, round_index: int) -> int:
    return int(np.random.SeedSequence([master, round_index]).generate_state(1)[0])


def _check_inputs(manifest: Manifest, features: FeatureSet, spec: ScenarioSpec) -> None:
    missing = [sid for sid in manifest.by_id if sid not in features]
    if missing:
        raise MissingFeatureError(
            f"{len(missing)} manifest ids lack feature rows (e.g. {sorted(missing)[:3]})"
        )
    referenced = {c for c, _ in spec.train + spec.validation + spec.test}
    undeclared = referenced - set(manifest.labels)
    if undeclared:
        raise LabelMismatchError(
            f"scenario {spec.name!r} references labels absent from the manifest: "
            f"{sorted(undeclared)}"
        )


def _train_round(
    cfg: ExperimentConfig,
    spec: ScenarioSpec,
    manifest: Manifest,
    features: FeatureSet,
    plan: QuarterPlan,
    round_index: int,
) -> RoundResult:
    train_ids, val_ids, test_ids = materialize_round(spec, plan, round_index)
    train_classes = spec.train_classes()
    class_index = {label: i for i, label in enumerate(train_classes)}
    # Classes outside the training frame must never reach a training or
    # validation batch; this is the point of the unlearned-class geometry.
    for sid in train_ids + val_ids:
        label = manifest.class_of(sid)
        if label not in class_index:
            raise RuntimeError(
                f"round {round_index}: class {label!r} leaked into train/validation"
            )
    round_seed = _round_seed(cfg.seed, round_index)
    head_kwargs = dict(cfg.head)
    head_kwargs.setdefault("seed", round_seed)
    head_cfg = HeadConfig(
        input_dim=features.dim,
        num_classes=len(train_classes),
        **{k: (tuple(v) if k == "hidden_dims" else v) for k, v in head_kwargs.items()},
    )
    train_set = features.select(train_ids)
    val_set = features.select(val_ids)
    train_y = np.array([class_index[manifest.class_of(sid)] for sid in train_ids])
    val_y = np.array([class_index[manifest.class_of(sid)] for sid in val_ids])
    model, trace = train(train_set.x, train_y, val_set.x, val_y, head_cfg)

    groups: list[ReferenceGroup] = []
    for group_spec in spec.reference_groups:
        ref_ids = sample_reference(
            manifest,
            group_spec.class_label,
            group_spec.count,
            train_ids,
            seed=round_seed,
            include_augmented=cfg.include_augmented_references,
        )
        ref_embed = model.embed_batch(features.select(ref_ids).x)
        groups.append(build_reference(ref_embed, cfg.lof_k, name=group_spec.name))

    test_set = features.select(test_ids)
    test_embed = model.embed_batch(test_set.x)
    embedded = FeatureSet(ids=list(test_set.ids), x=test_embed)
    true_labels = {
        sid: "normal" if is_normal_label(manifest.class_of(sid)) else "abnormal"
        for sid in test_ids
    }
    disease_labels = {
        sid: manifest.class_of(sid) if true_labels[sid] == "abnormal" else "-"
        for sid in test_ids
    }
    records = score_batch(groups, embedded, true_labels, disease_labels, cfg.threshold)
    if len(records) != len(test_ids):
        raise RuntimeError(
            f"round {round_index}: scored {len(records)} records for {len(test_ids)} test ids"
        )
    report = per_disease_report(records, cfg.threshold)
    report.extras["round"] = round_index
    report.extras["best_epoch"] = trace.best_epoch
    return RoundResult(
        round_index=round_index,
        model=model,
        trace=trace,
        records=records,
        report=report,
        group_names=[g.name for g in groups],
    )


def _averaged_metrics(rounds: list[RoundResult]) -> dict:
    aucs = [r.report.auc for r in rounds]
    fprs = [r.report.fpr_at_tpr1 for r in rounds]
    return {
        "auc": round(float(np.mean(aucs)), 7),
        "fpr_at_tpr1": round(float(np.mean(fprs)), 7),
        "rounds": len(rounds),
    }


def _thread_cap() -> int:
    raw = os.environ.get("OODR_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def run(
    cfg: ExperimentConfig,
    manifest: Manifest | None = None,
    features: FeatureSet | None = None,
    persist: bool = True,
) -> RunResult:
    """Execute every round of the configured scenario.

    manifest/features may be passed in-memory; otherwise they load from the
    config paths. With persist=True all artifacts land under output_dir:
    folds.tsv, per-round checkpoint/trace/scores/report/roc, and the
    top-level report.json carrying pooled metrics plus provenance.
    """
    if manifest is None:
        manifest = load_manifest(cfg.manifest)
    if features is None:
        features = merge_feature_sets([read_feature_file(p) for p in cfg.features])
    spec = resolve_scenario(cfg)
    _check_inputs(manifest, features, spec)
    plan = partition_quarters(manifest, cfg.seed, cfg.grouping)

    round_indices = list(range(1, spec.rounds + 1))
    workers = min(_thread_cap(), len(round_indices))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rounds = list(
                pool.map(
                    lambda r: _train_round(cfg, spec, manifest, features, plan, r),
                    round_indices,
                )
            )
    else:
        rounds = [
            _train_round(cfg, spec, manifest, features, plan, r) for r in round_indices
        ]

    pooled_records = [rec for rnd in rounds for rec in rnd.records]
    pooled = per_disease_report(pooled_records, cfg.threshold)
    result = RunResult(
        scenario=spec,
        rounds=rounds,
        pooled=pooled,
        averaged=_averaged_metrics(rounds),
        config_hash=cfg.content_hash(),
        seed=cfg.seed,
    )
    if persist:
        _persist(cfg, plan, result)
    return result


def _persist(cfg: ExperimentConfig, plan: QuarterPlan, result: RunResult) -> None:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_fold_assignments(str(out / "folds.tsv"), plan)
    with open(out / "config.json", "w", encoding="utf-8") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    for rnd in result.rounds:
        rdir = out / f"round_{rnd.round_index}"
        rdir.mkdir(exist_ok=True)
        save_checkpoint(str(rdir / "checkpoint.mhd"), rnd.model)
        write_trace(str(rdir / "trace.tsv"), rnd.trace)
        write_scores(str(rdir / "scores.tsv"), rnd.records, rnd.group_names)
        write_report(str(rdir / "report.json"), rnd.report)
        curve, _ = roc_auc(rnd.records)
        write_roc(str(rdir / "roc.tsv"), curve)
    with open(out / "report.json", "w", encoding="utf-8") as fh:
        json.dump(result.report_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
