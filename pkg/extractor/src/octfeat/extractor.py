"""Manifest-driven batch feature extraction.

Output rows follow manifest order. Unreadable images do not abort the
run; they are collected as (id, reason) exclusions and skipped.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from PIL import Image
from torch import nn

from .backbones import ExtractorConfig, build_backbone, probe_dim
from .featio import write_feat
from .manifest import ManifestRow, read_manifest

# standard ImageNet channel statistics
_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)


@dataclass(frozen=True)
class ExtractResult:
    path: str
    ids: tuple[str, ...]
    dim: int
    excluded: tuple[tuple[str, str], ...]


def load_image_tensor(path: str, input_size: int) -> torch.Tensor:
    """One image -> normalized CHW float tensor.

    Grayscale inputs are replicated to 3 channels by the RGB convert; the
    only geometry change is the bilinear resize to the backbone's input.
    """
    with Image.open(path) as im:
        rgb = im.convert("RGB").resize((input_size, input_size), Image.BILINEAR)
    arr = np.asarray(rgb, dtype=np.float32) / 255.0
    arr = (arr - _MEAN) / _STD
    return torch.from_numpy(arr.transpose(2, 0, 1))


def _load_rows(
    rows: list[ManifestRow], input_size: int
) -> tuple[list[str], list[torch.Tensor], list[tuple[str, str]]]:
    ids: list[str] = []
    tensors: list[torch.Tensor] = []
    excluded: list[tuple[str, str]] = []
    for row in rows:
        try:
            tensors.append(load_image_tensor(row.source_path, input_size))
            ids.append(row.id)
        except (OSError, ValueError) as exc:
            excluded.append((row.id, str(exc)))
    return ids, tensors, excluded


def extract(cfg: ExtractorConfig, backbone: nn.Module | None = None) -> ExtractResult:
    """Embed every readable manifest image and write a FEAT1 file.

    ``backbone`` may be a prebuilt module (config backbone "pluggable", or
    a just-finetuned trunk); otherwise it is built from the config. Eval
    mode plus fixed weights makes two runs byte-identical.
    """
    rows = read_manifest(cfg.manifest)
    if backbone is None:
        model, dim = build_backbone(cfg)
    else:
        model = backbone.to(cfg.device)
        model.eval()
        dim = probe_dim(model, cfg.input_size, cfg.device)
    ids, tensors, excluded = _load_rows(rows, cfg.input_size)
    chunks: list[np.ndarray] = []
    model.eval()
    with torch.no_grad():
        for start in range(0, len(tensors), cfg.batch_size):
            batch = torch.stack(tensors[start: start + cfg.batch_size]).to(cfg.device)
            out = model(batch)
            chunks.append(out.cpu().numpy().astype(np.float32))
    values = np.concatenate(chunks) if chunks else np.empty((0, dim), dtype=np.float32)
    if not np.isfinite(values).all():
        raise FloatingPointError("non-finite feature values")
    write_feat(cfg.out, ids, values)
    return ExtractResult(path=cfg.out, ids=tuple(ids), dim=dim, excluded=tuple(excluded))
