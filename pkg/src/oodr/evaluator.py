"""ROC/AUC evaluation of score records with per-disease breakdowns.

All decision rules use the strict comparison score > threshold, so the
confusion counts, the ROC sweep, and the closed-form FPR at TPR = 1 agree
with each other by construction. Reported numbers carry 7 decimal places.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .lof import ScoreRecord


class SingleClassError(ValueError):
    """Records contain only normals or only abnormals."""


@dataclass(frozen=True)
class RocCurve:
    fpr: tuple[float, ...]
    tpr: tuple[float, ...]
    thresholds: tuple[float, ...]

    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.fpr, self.tpr))


@dataclass
class DiseaseStats:
    auc: float
    fpr_at_tpr1: float
    n_abnormal: int


@dataclass
class EvalReport:
    auc: float
    fpr_at_tpr1: float
    per_disease: dict[str, DiseaseStats]
    counts: dict[str, int]
    threshold: float | None = None
    tpr: float | None = None
    fpr: float | None = None
    tnr: float | None = None
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        def r7(x: float | None) -> float | None:
            return None if x is None else round(float(x), 7)

        out = {
            "auc": r7(self.auc),
            "fpr_at_tpr1": r7(self.fpr_at_tpr1),
            "per_disease": {
                name: {
                    "auc": r7(stats.auc),
                    "fpr_at_tpr1": r7(stats.fpr_at_tpr1),
                    "n_abnormal": stats.n_abnormal,
                }
                for name, stats in sorted(self.per_disease.items())
            },
            "counts": dict(sorted(self.counts.items())),
        }
        if self.threshold is not None:
            out["threshold"] = r7(self.threshold)
            out["tpr"] = r7(self.tpr)
            out["fpr"] = r7(self.fpr)
            out["tnr"] = r7(self.tnr)
        out.update(self.extras)
        return out


def _split_scores(records: list[ScoreRecord]) -> tuple[np.ndarray, np.ndarray]:
    normals = np.array([r.combined for r in records if r.true_label == "normal"])
    abnormals = np.array([r.combined for r in records if r.true_label != "normal"])
    if normals.size == 0 or abnormals.size == 0:
        raise SingleClassError(
            f"need both classes, got {normals.size} normal / {abnormals.size} abnormal"
        )
    return normals, abnormals


def confusion(records: list[ScoreRecord], threshold: float) -> tuple[float, float, float]:
    """(TPR, FPR, TNR) under the strict rule abnormal iff score > threshold."""
    normals, abnormals = _split_scores(records)
    tpr = float((abnormals > threshold).mean())
    fpr = float((normals > threshold).mean())
    return tpr, fpr, 1.0 - fpr


def _roc_from_scores(normals: np.ndarray, abnormals: np.ndarray) -> RocCurve:
    # Sweep the distinct scores descending; each tau plots the strict-> rule.
    # tau = max gives (0,0); the -inf sentinel flags everything, giving (1,1).
    thresholds = np.unique(np.concatenate([normals, abnormals]))[::-1]
    thresholds = np.append(thresholds, -np.inf)
    norm_sorted = np.sort(normals)
    abn_sorted = np.sort(abnormals)
    fpr = (normals.size - np.searchsorted(norm_sorted, thresholds, side="right")) / normals.size
    tpr = (abnormals.size - np.searchsorted(abn_sorted, thresholds, side="right")) / abnormals.size
    return RocCurve(
        fpr=tuple(float(v) for v in fpr),
        tpr=tuple(float(v) for v in tpr),
        thresholds=tuple(float(v) for v in thresholds),
    )


def _trapezoid(curve: RocCurve) -> float:
    area = 0.0
    for i in range(len(curve.fpr) - 1):
        area += (curve.fpr[i + 1] - curve.fpr[i]) * (curve.tpr[i + 1] + curve.tpr[i]) / 2.0
    return area


def roc_auc(records: list[ScoreRecord]) -> tuple[RocCurve, float]:
    normals, abnormals = _split_scores(records)
    curve = _roc_from_scores(normals, abnormals)
    return curve, _trapezoid(curve)


def fpr_at_tpr1(records: list[ScoreRecord]) -> float:
    """Smallest FPR at full sensitivity.

    Under the strict-> rule TPR hits 1 exactly when the threshold drops below
    the minimum abnormal score, so the answer is the fraction of normals at or
    above that minimum.
    """
    normals, abnormals = _split_scores(records)
    return float((normals >= abnormals.min()).mean())


def fpr_at_tpr1_from_curve(curve: RocCurve) -> float:
    """ROC-sweep version of fpr_at_tpr1, for cross-checking."""
    candidates = [f for f, t in zip(curve.fpr, curve.tpr) if t >= 1.0]
    return min(candidates)


def per_disease_report(
    records: list[ScoreRecord], threshold: float | None = None
) -> EvalReport:
    """Per-disease (vs all normals) and aggregate AUC / FPR@TPR=1."""
    normal_recs = [r for r in records if r.true_label == "normal"]
    abnormal_recs = [r for r in records if r.true_label != "normal"]
    if not normal_recs or not abnormal_recs:
        raise SingleClassError(
            f"need both classes, got {len(normal_recs)} normal / {len(abnormal_recs)} abnormal"
        )
    per_disease: dict[str, DiseaseStats] = {}
    for disease in sorted({r.disease_label for r in abnormal_recs}):
        subset = normal_recs + [r for r in abnormal_recs if r.disease_label == disease]
        _, auc = roc_auc(subset)
        per_disease[disease] = DiseaseStats(
            auc=auc,
            fpr_at_tpr1=fpr_at_tpr1(subset),
            n_abnormal=len(subset) - len(normal_recs),
        )
    _, agg_auc = roc_auc(records)
    counts = {
        "normal": len(normal_recs),
        "abnormal": len(abnormal_recs),
    }
    report = EvalReport(
        auc=agg_auc,
        fpr_at_tpr1=fpr_at_tpr1(records),
        per_disease=per_disease,
        counts=counts,
    )
    if threshold is not None:
        tpr, fpr, tnr = confusion(records, threshold)
        report.threshold = threshold
        report.tpr, report.fpr, report.tnr = tpr, fpr, tnr
    return report


def report_to_json(report: EvalReport) -> str:
    return json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"


def write_report(path: str, report: EvalReport) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(report_to_json(report))


def write_roc(path: str, curve: RocCurve) -> None:
    """ROC points as text: fpr, tpr, threshold per line."""
    with open(path, "w", encoding="utf-8") as fh:
        for f, t, tau in zip(curve.fpr, curve.tpr, curve.thresholds):
            tau_str = "-inf" if math.isinf(tau) and tau < 0 else f"{tau:.9f}"
            fh.write(f"{f:.7f}\t{t:.7f}\t{tau_str}\n")
