"""Shared oracles and builders for the test suite.

The oracles here deliberately re-derive everything from first principles
with plain loops, so they share no code path with the implementations they
check.
"""

from __future__ import annotations

import math

import numpy as np

from oodr.lof import ScoreRecord


def brute_lof(reference: np.ndarray, query: np.ndarray, k: int) -> float:
    """Definitional LOF of a query in novelty mode: full pairwise distance
    table, then plain loops over the textbook formulas."""
    ref = [list(map(float, row)) for row in reference]
    n = len(ref)

    def dist(a, b) -> float:
        return math.sqrt(sum((x - y) ** 2 for x, y in zip(a, b)))

    dmat = [[dist(ref[i], ref[j]) for j in range(n)] for i in range(n)]

    # k-distance and neighborhood of every reference point, ties included
    kdist = []
    neighborhoods = []
    for i in range(n):
        others = sorted(dmat[i][j] for j in range(n) if j != i)
        kd = others[k - 1]
        kdist.append(kd)
        neighborhoods.append([j for j in range(n) if j != i and dmat[i][j] <= kd])

    def lrd_of(dist_row, neigh) -> float:
        total = 0.0
        for j in neigh:
            total += max(kdist[j], dist_row[j])
        return len(neigh) / max(total, 1e-12)

    lrd = [lrd_of(dmat[i], neighborhoods[i]) for i in range(n)]

    q = list(map(float, query))
    qdist = [dist(q, ref[j]) for j in range(n)]
    q_kdist = sorted(qdist)[k - 1]
    q_neigh = [j for j in range(n) if qdist[j] <= q_kdist]
    q_lrd = lrd_of(qdist, q_neigh)
    return sum(lrd[j] for j in q_neigh) / (len(q_neigh) * q_lrd)


def mann_whitney_auc(normals, abnormals) -> float:
    """Pair-counting AUC: wins count 1, ties count half."""
    wins = 0.0
    for a in abnormals:
        for n in normals:
            if a > n:
                wins += 1.0
            elif a == n:
                wins += 0.5
    return wins / (len(normals) * len(abnormals))


def make_records(normals, abnormals, disease: str = "dz") -> list[ScoreRecord]:
    """ScoreRecords from two flat score lists (single group)."""
    records = []
    for i, s in enumerate(normals):
        s = float(s)
        records.append(ScoreRecord(f"n{i:04d}", "normal", "-", {"g": s}, s))
    for i, s in enumerate(abnormals):
        s = float(s)
        records.append(ScoreRecord(f"a{i:04d}", "abnormal", disease, {"g": s}, s))
    return records


def make_disease_records(normals, by_disease: dict) -> list[ScoreRecord]:
    records = []
    for i, s in enumerate(normals):
        s = float(s)
        records.append(ScoreRecord(f"n{i:04d}", "normal", "-", {"g": s}, s))
    for disease, scores in by_disease.items():
        for i, s in enumerate(scores):
            s = float(s)
            records.append(ScoreRecord(f"{disease}{i:04d}", "abnormal", disease, {"g": s}, s))
    return records
