"""FEAT1 feature-file writer and reader.

Layout, all little-endian: magic ``FEAT1``, u32 row count n, u32 dim d,
then n length-prefixed UTF-8 ids (u32 byte length each), then n*d f32
values row-major. This is the interchange format the screening pipeline
consumes; nothing else is shared with it.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"FEAT1"


class FeatureFileError(ValueError):
    pass


def write_feat(path: str, ids: list[str], values: np.ndarray) -> None:
    x = np.ascontiguousarray(values, dtype="<f4")
    if x.ndim != 2:
        raise FeatureFileError(f"values must be 2-D, got shape {x.shape}")
    if len(ids) != x.shape[0]:
        raise FeatureFileError(f"{len(ids)} ids for {x.shape[0]} rows")
    if len(set(ids)) != len(ids):
        raise FeatureFileError("duplicate ids")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", x.shape[0], x.shape[1]))
        for sid in ids:
            raw = sid.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
        fh.write(x.tobytes(order="C"))


def read_feat(path: str) -> tuple[list[str], np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(MAGIC)] != MAGIC:
        raise FeatureFileError(f"{path}: bad magic")
    off = len(MAGIC)
    if len(blob) < off + 8:
        raise FeatureFileError(f"{path}: truncated header")
    n, d = struct.unpack_from("<II", blob, off)
    off += 8
    ids = []
    for _ in range(n):
        if len(blob) < off + 4:
            raise FeatureFileError(f"{path}: truncated id table")
        (length,) = struct.unpack_from("<I", blob, off)
        off += 4
        if len(blob) < off + length:
            raise FeatureFileError(f"{path}: truncated id")
        ids.append(blob[off: off + length].decode("utf-8"))
        off += length
    need = n * d * 4
    if len(blob) - off != need:
        raise FeatureFileError(f"{path}: expected {need} value bytes, got {len(blob) - off}")
    values = np.frombuffer(blob, dtype="<f4", count=n * d, offset=off).reshape(n, d)
    return ids, values.copy()
