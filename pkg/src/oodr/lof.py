"""Local outlier factor novelty scoring against fixed reference groups.

A reference group is a set of normal embeddings with per-point k-distance
and local reachability density precomputed. Queries are scored in novelty
mode: neighbors come from the reference set only, the query never joins
it. With several groups the combined score is the minimum over groups, the
unique scalar whose thresholding reproduces the rule "abnormal iff every
group's score exceeds the threshold".
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .features import FeatureSet

REACH_SUM_FLOOR = 1e-12
_CHUNK = 1024


class EmptyGroupError(ValueError):
    pass


class NeighborCountError(ValueError):
    """k must satisfy 1 <= k < n."""


@dataclass(frozen=True)
class ReferenceGroup:
    """Immutable reference set with precomputed LOF quantities."""

    name: str
    embeddings: np.ndarray
    k: int
    kdist: np.ndarray = field(repr=False)
    lrd: np.ndarray = field(repr=False)

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def __len__(self) -> int:
        return self.embeddings.shape[0]


def _pairwise_sq(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # Accumulate (a_j - b_j)^2 per dimension. The a^2 - 2ab + b^2 expansion
    # cancels catastrophically on near-neighbors and the error survives into
    # the lrd ratios; direct differences keep squared distances exact to a
    # few ulps with only an (n, m) temp per dimension.
    sq = np.zeros((a.shape[0], b.shape[0]))
    for j in range(a.shape[1]):
        diff = a[:, j, None] - b[None, :, j]
        sq += diff * diff
    return sq


def build_reference(embeddings: np.ndarray, k: int, name: str = "ref") -> ReferenceGroup:
    """Precompute k-distance and lrd for every reference point.

    Neighborhoods include ties: every other point at distance <= k-distance
    belongs to N_k(o), so |N_k(o)| can exceed k.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise EmptyGroupError("reference embeddings must be a nonempty 2-D array")
    if not np.isfinite(x).all():
        raise ValueError("reference embeddings must be finite")
    n = x.shape[0]
    if not 1 <= k < n:
        raise NeighborCountError(f"need 1 <= k < n, got k={k}, n={n}")
    d = np.sqrt(_pairwise_sq(x, x))
    np.fill_diagonal(d, np.inf)
    kdist = np.sort(d, axis=1)[:, k - 1]
    neigh = d <= kdist[:, None]
    reach = np.maximum(kdist[None, :], d)
    reach_sums = np.where(neigh, reach, 0.0).sum(axis=1)
    counts = neigh.sum(axis=1)
    lrd = counts / np.maximum(reach_sums, REACH_SUM_FLOOR)
    return ReferenceGroup(name=name, embeddings=x, k=k, kdist=kdist, lrd=lrd)


def _lof_rows(group: ReferenceGroup, queries: np.ndarray) -> np.ndarray:
    d = np.sqrt(_pairwise_sq(queries, group.embeddings))
    q_kdist = np.sort(d, axis=1)[:, group.k - 1]
    neigh = d <= q_kdist[:, None]
    reach = np.maximum(group.kdist[None, :], d)
    reach_sums = np.where(neigh, reach, 0.0).sum(axis=1)
    counts = neigh.sum(axis=1)
    q_lrd = counts / np.maximum(reach_sums, REACH_SUM_FLOOR)
    neighbor_lrd_mean = np.where(neigh, group.lrd[None, :], 0.0).sum(axis=1) / counts
    return neighbor_lrd_mean / q_lrd


def score(group: ReferenceGroup, query: np.ndarray) -> float:
    """Novelty-mode LOF of one query against the group."""
    q = np.asarray(query, dtype=np.float64)
    if q.ndim != 1 or q.shape[0] != group.dim:
        raise ValueError(f"query must be a vector of dim {group.dim}, got shape {q.shape}")
    if not np.isfinite(q).all():
        raise ValueError("query must be finite")
    return float(_lof_rows(group, q[None, :])[0])


def score_matrix(group: ReferenceGroup, queries: np.ndarray) -> np.ndarray:
    """LOF of each query row against the group, chunked for memory."""
    q = np.asarray(queries, dtype=np.float64)
    if q.ndim != 2 or q.shape[1] != group.dim:
        raise ValueError(f"queries must be (n, {group.dim}), got {q.shape}")
    if not np.isfinite(q).all():
        raise ValueError("queries must be finite")
    chunks = [q[i: i + _CHUNK] for i in range(0, q.shape[0], _CHUNK)]
    workers = _thread_cap()
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda c: _lof_rows(group, c), chunks))
    else:
        parts = [_lof_rows(group, c) for c in chunks]
    return np.concatenate(parts) if parts else np.empty(0)


def _thread_cap() -> int:
    raw = os.environ.get("OODR_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


@dataclass(frozen=True)
class ScoreRecord:
    sample_id: str
    true_label: str
    disease_label: str
    scores: dict[str, float]
    combined: float
    predicted: str | None = None


def score_batch(
    groups: list[ReferenceGroup],
    queries: FeatureSet,
    true_labels: dict[str, str],
    disease_labels: dict[str, str],
    threshold: float | None = None,
) -> list[ScoreRecord]:
    """Score every query against every group; combined = min over groups.

    ``true_labels`` maps sample id to "normal"/"abnormal"; ``disease_labels``
    to a disease name or "-". With a threshold, abnormal is predicted iff
    combined > threshold (strict).
    """
    if not groups:
        raise EmptyGroupError("need at least one reference group")
    dims = {g.dim for g in groups}
    if len(dims) != 1 or queries.dim not in dims:
        raise ValueError(f"dimension mismatch: groups {sorted(dims)}, queries {queries.dim}")
    per_group = {g.name: score_matrix(g, queries.x) for g in groups}
    records: list[ScoreRecord] = []
    for i, sid in enumerate(queries.ids):
        group_scores = {name: float(vals[i]) for name, vals in per_group.items()}
        combined = min(group_scores.values())
        predicted = None
        if threshold is not None:
            predicted = "abnormal" if combined > threshold else "normal"
        records.append(
            ScoreRecord(
                sample_id=sid,
                true_label=true_labels[sid],
                disease_label=disease_labels.get(sid, "-"),
                scores=group_scores,
                combined=combined,
                predicted=predicted,
            )
        )
    return records


def write_scores(path: str, records: list[ScoreRecord], group_names: list[str]) -> None:
    """Score TSV: id, true label, disease, one column per group, combined."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("#groups: " + ",".join(group_names) + "\n")
        for rec in records:
            cols = [rec.sample_id, rec.true_label, rec.disease_label]
            cols.extend(f"{rec.scores[name]:.9f}" for name in group_names)
            cols.append(f"{rec.combined:.9f}")
            fh.write("\t".join(cols) + "\n")


def read_scores(path: str) -> list[ScoreRecord]:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("#groups:"):
        raise ValueError(f"{path}: missing '#groups:' header")
    names = [s.strip() for s in lines[0][len("#groups:"):].split(",") if s.strip()]
    records = []
    for line_no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 3 + len(names) + 1:
            raise ValueError(f"{path}:{line_no}: expected {4 + len(names)} fields")
        scores = {name: float(v) for name, v in zip(names, fields[3:-1])}
        records.append(
            ScoreRecord(
                sample_id=fields[0],
                true_label=fields[1],
                disease_label=fields[2],
                scores=scores,
                combined=float(fields[-1]),
            )
        )
    return records
