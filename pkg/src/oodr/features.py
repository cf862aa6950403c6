"""Labeled feature vectors and the FEAT1 binary file format.

FEAT1 layout (little-endian): magic ``FEAT1``, u32 row count n, u32 dim d,
then n ids (each a u32 byte length followed by UTF-8 bytes), then n*d f32
values row-major. The format is shared with external feature extractors;
anything that writes it can feed this toolkit.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"FEAT1"


class FeatureFileError(Exception):
    """Malformed FEAT1 file."""


class MissingFeatureError(KeyError):
    """An id required by the pipeline has no feature row."""


@dataclass(frozen=True)
class FeatureRecord:
    """One id with its feature vector."""

    id: str
    vector: np.ndarray


@dataclass
class FeatureSet:
    """Feature matrix with aligned ids and optional integer labels.

    ``x`` is (n, d) float; ``y`` when present holds class indices used by
    the metric head; ``label_names`` maps those indices back to class labels.
    """

    ids: list[str]
    x: np.ndarray
    y: np.ndarray | None = None
    label_names: list[str] | None = None
    _index: dict[str, int] = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        self.x = np.asarray(self.x, dtype=np.float64)
        if self.x.ndim != 2:
            raise ValueError(f"feature matrix must be 2-D, got shape {self.x.shape}")
        if len(self.ids) != self.x.shape[0]:
            raise ValueError(f"{len(self.ids)} ids for {self.x.shape[0]} rows")
        if not self._index:
            self._index = {sid: i for i, sid in enumerate(self.ids)}
        if len(self._index) != len(self.ids):
            raise ValueError("duplicate ids in feature set")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return int(self.x.shape[1])

    def __contains__(self, sample_id: str) -> bool:
        return sample_id in self._index

    def get(self, sample_id: str) -> np.ndarray:
        try:
            return self.x[self._index[sample_id]]
        except KeyError:
            raise MissingFeatureError(sample_id) from None

    def select(self, ids: list[str]) -> "FeatureSet":
        """Subset preserving the given id order; raises on any missing id."""
        missing = [sid for sid in ids if sid not in self._index]
        if missing:
            raise MissingFeatureError(
                f"{len(missing)} ids have no feature row (first: {missing[0]!r})"
            )
        rows = [self._index[sid] for sid in ids]
        return FeatureSet(ids=list(ids), x=self.x[rows].copy())

    def records(self):
        for i, sid in enumerate(self.ids):
            yield FeatureRecord(sid, self.x[i])


def write_feature_file(path: str, feats: FeatureSet) -> None:
    """Write a FeatureSet as FEAT1 (values stored as f32)."""
    n, d = feats.x.shape
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", n, d))
        for sid in feats.ids:
            raw = sid.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
        fh.write(np.ascontiguousarray(feats.x, dtype="<f4").tobytes())


def read_feature_file(path: str) -> FeatureSet:
    """Read a FEAT1 file into a FeatureSet."""
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise FeatureFileError(f"{path}: bad magic {magic!r}")
        header = fh.read(8)
        if len(header) != 8:
            raise FeatureFileError(f"{path}: truncated header")
        n, d = struct.unpack("<II", header)
        ids = []
        for _ in range(n):
            raw_len = fh.read(4)
            if len(raw_len) != 4:
                raise FeatureFileError(f"{path}: truncated id table")
            (length,) = struct.unpack("<I", raw_len)
            raw = fh.read(length)
            if len(raw) != length:
                raise FeatureFileError(f"{path}: truncated id entry")
            ids.append(raw.decode("utf-8"))
        payload = fh.read(n * d * 4)
        if len(payload) != n * d * 4:
            raise FeatureFileError(f"{path}: expected {n * d} f32 values")
        x = np.frombuffer(payload, dtype="<f4").reshape(n, d)
    return FeatureSet(ids=ids, x=x.astype(np.float64))


def merge_feature_sets(sets: list[FeatureSet]) -> FeatureSet:
    """Concatenate feature sets; duplicate ids or dim mismatch are errors."""
    if not sets:
        raise ValueError("no feature sets to merge")
    if len(sets) == 1:
        return sets[0]
    dims = {fs.dim for fs in sets}
    if len(dims) != 1:
        raise FeatureFileError(f"feature dimension mismatch across files: {sorted(dims)}")
    ids: list[str] = []
    for fs in sets:
        ids.extend(fs.ids)
    if len(set(ids)) != len(ids):
        raise FeatureFileError("duplicate ids across feature files")
    return FeatureSet(ids=ids, x=np.vstack([fs.x for fs in sets]))
