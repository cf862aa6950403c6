"""Gaussian-cluster stand-ins for backbone features, at desk scale.

Generates a manifest plus matching feature file from a cluster spec so the
full pipeline (including the unlearned-class geometry, where some classes
appear only in the test frame) can run without any real images.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataset import Manifest, SampleRecord, is_normal_label
from .features import FeatureSet


class DegenerateCovarianceError(ValueError):
    """Covariance is not symmetric positive definite."""


@dataclass(frozen=True)
class ClusterSpec:
    label: str
    count: int
    mean: tuple[float, ...] | None = None
    cov: tuple[tuple[float, ...], ...] | None = None
    scale: float = 1.0


@dataclass(frozen=True)
class SyntheticConfig:
    clusters: tuple[ClusterSpec, ...]
    dim: int = 8
    separation: float = 10.0
    seed: int = 0
    patients_per_cluster: int = 0

    def __post_init__(self) -> None:
        if len(self.clusters) < 2:
            raise ValueError("need at least 2 clusters")
        labels = [c.label for c in self.clusters]
        if len(set(labels)) != len(labels):
            raise ValueError("cluster labels must be unique")
        if not any(is_normal_label(c.label) for c in self.clusters):
            raise ValueError("at least one cluster label must be normal or normal_*")
        if self.dim < 1:
            raise ValueError("dim must be >= 1")


def _cluster_mean(spec: ClusterSpec, index: int, dim: int, separation: float) -> np.ndarray:
    if spec.mean is not None:
        mean = np.asarray(spec.mean, dtype=np.float64)
        if mean.shape != (dim,):
            raise ValueError(f"cluster {spec.label!r}: mean has shape {mean.shape}, want ({dim},)")
        return mean
    # Default placement: clusters sit apart along distinct axes (cluster i
    # at separation * e_{i mod dim}), with a growing offset when clusters
    # outnumber dimensions.
    mean = np.zeros(dim)
    mean[index % dim] = separation * (1 + index // dim)
    return mean


def _cholesky(spec: ClusterSpec, dim: int) -> np.ndarray:
    if spec.cov is None:
        return np.eye(dim) * spec.scale
    cov = np.asarray(spec.cov, dtype=np.float64)
    if cov.shape != (dim, dim):
        raise DegenerateCovarianceError(
            f"cluster {spec.label!r}: covariance shape {cov.shape}, want ({dim}, {dim})"
        )
    if not np.allclose(cov, cov.T):
        raise DegenerateCovarianceError(f"cluster {spec.label!r}: covariance not symmetric")
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise DegenerateCovarianceError(
            f"cluster {spec.label!r}: covariance not positive definite"
        ) from exc


def make_synthetic(cfg: SyntheticConfig) -> tuple[Manifest, FeatureSet]:
    """Deterministic Gaussian clusters as (manifest, feature set)."""
    rng = np.random.default_rng(cfg.seed)
    ids: list[str] = []
    records: list[SampleRecord] = []
    rows: list[np.ndarray] = []
    for index, spec in enumerate(cfg.clusters):
        mean = _cluster_mean(spec, index, cfg.dim, cfg.separation)
        chol = _cholesky(spec, cfg.dim)
        noise = rng.standard_normal((spec.count, cfg.dim))
        rows.append(mean[None, :] + noise @ chol.T)
        for i in range(spec.count):
            sid = f"{spec.label}_{i:05d}"
            patient = (
                f"{spec.label}_p{i % cfg.patients_per_cluster:03d}"
                if cfg.patients_per_cluster > 0
                else None
            )
            ids.append(sid)
            records.append(
                SampleRecord(
                    id=sid,
                    class_label=spec.label,
                    source_path=f"synthetic://{sid}",
                    patient_id=patient,
                )
            )
    manifest = Manifest(labels=tuple(c.label for c in cfg.clusters), records=records)
    feats = FeatureSet(ids=ids, x=np.vstack(rows))
    return manifest, feats


@dataclass(frozen=True)
class _Simple:
    labels: tuple[str, ...] = ("normal", "disease_a", "disease_b", "disease_c")
    count: int = 500


def default_four_cluster(
    count: int = 500, dim: int = 8, separation: float = 10.0, seed: int = 0,
    labels: tuple[str, ...] = _Simple.labels,
) -> SyntheticConfig:
    """Four well-separated unit-covariance clusters, one normal."""
    return SyntheticConfig(
        clusters=tuple(ClusterSpec(label=lab, count=count) for lab in labels),
        dim=dim,
        separation=separation,
        seed=seed,
    )
