"""Stochastic image expansion: horizontal flips and small center rotations.

Images are numpy arrays in [0,1], shape (h, w) for grayscale or (h, w, 3)
for RGB. The pipeline applies a flip with probability ``p_flip`` and then a
rotation with probability ``p_rotate``; expansion draws sources uniformly
with replacement until the requested output count is reached. All draws for
one output are pre-assigned from the seed stream, so outputs can be built
in any order (or in parallel) with identical results.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from PIL import Image

MAX_ANGLE_DEG = 90.0


class EmptySourceError(ValueError):
    """expand() was handed no source images."""


@dataclass(frozen=True)
class AugmentPipelineConfig:
    p_flip: float = 0.8
    p_rotate: float = 0.7
    angle_range_deg: tuple[float, float] = (-10.0, 10.0)
    fill: str = "black"
    seed: int = 0

    def __post_init__(self) -> None:
        if not (0.0 <= self.p_flip <= 1.0 and 0.0 <= self.p_rotate <= 1.0):
            raise ValueError("probabilities must lie in [0,1]")
        lo, hi = self.angle_range_deg
        if lo > hi:
            raise ValueError(f"angle range lo {lo} exceeds hi {hi}")
        if max(abs(lo), abs(hi)) > MAX_ANGLE_DEG:
            raise ValueError(f"|angle| must stay within {MAX_ANGLE_DEG} degrees")
        if self.fill not in ("black", "edge"):
            raise ValueError(f"fill must be black or edge, got {self.fill!r}")


def _check_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[2] not in (1, 3):
        raise ValueError(f"channel count must be 1 or 3, got {img.shape[2]}")
    if img.ndim not in (2, 3):
        raise ValueError(f"image must be 2-D or 3-D, got shape {img.shape}")
    if not np.isfinite(img).all():
        raise ValueError("image contains non-finite values")
    if img.size and (img.min() < 0.0 or img.max() > 1.0):
        raise ValueError("pixel values must lie in [0,1]")
    return img


def flip_horizontal(img: np.ndarray) -> np.ndarray:
    """Mirror columns: column j goes to column width-1-j."""
    img = _check_image(img)
    return np.ascontiguousarray(img[:, ::-1])


def rotate(img: np.ndarray, angle_deg: float, fill: str = "black") -> np.ndarray:
    """Rotate about the image center onto a same-size canvas, bilinear.

    Positive angles turn the content counterclockwise in the usual x-right,
    y-down raster frame. Pixels whose source falls outside the input take the
    fill value: 0 for ``black``, the clamped nearest edge pixel for ``edge``.
    """
    img = _check_image(img)
    if abs(angle_deg) > MAX_ANGLE_DEG:
        raise ValueError(f"|angle_deg| must be <= {MAX_ANGLE_DEG}, got {angle_deg}")
    if fill not in ("black", "edge"):
        raise ValueError(f"fill must be black or edge, got {fill!r}")
    if angle_deg == 0.0:
        return img.copy()
    squeeze = img.ndim == 2
    if squeeze:
        img = img[:, :, None]
    h, w, c = img.shape
    cy = (h - 1) / 2.0
    cx = (w - 1) / 2.0
    theta = math.radians(angle_deg)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    dx = xs - cx
    dy = ys - cy
    # Inverse map: source coords that land on each output pixel.
    src_x = cos_t * dx + sin_t * dy + cx
    src_y = -sin_t * dx + cos_t * dy + cy
    inside = (src_x >= 0) & (src_x <= w - 1) & (src_y >= 0) & (src_y <= h - 1)
    x0 = np.floor(np.clip(src_x, 0, w - 1)).astype(np.int64)
    y0 = np.floor(np.clip(src_y, 0, h - 1)).astype(np.int64)
    x0 = np.minimum(x0, w - 2) if w > 1 else np.zeros_like(x0)
    y0 = np.minimum(y0, h - 2) if h > 1 else np.zeros_like(y0)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = np.clip(src_x, 0, w - 1) - x0
    fy = np.clip(src_y, 0, h - 1) - y0
    out = np.zeros_like(img)
    for ch in range(c):
        plane = img[:, :, ch]
        top = plane[y0, x0] * (1 - fx) + plane[y0, x1] * fx
        bot = plane[y1, x0] * (1 - fx) + plane[y1, x1] * fx
        out[:, :, ch] = top * (1 - fy) + bot * fy
    if fill == "black":
        out[~inside] = 0.0
    # edge fill: the clamped coordinates above already sample the nearest
    # source pixel for out-of-bounds targets, so nothing further to do.
    np.clip(out, 0.0, 1.0, out=out)
    return out[:, :, 0] if squeeze else out


@dataclass(frozen=True)
class AppliedOps:
    """What the pipeline did to one output."""

    output_id: str
    parent_id: str
    flipped: bool
    angle_deg: float | None


def _draw_plan(
    n_sources: int, target_count: int, cfg: AugmentPipelineConfig
) -> list[tuple[int, bool, float | None]]:
    # One fixed-shape draw block per output keeps the stream stationary, so
    # outputs can be rendered out of order without changing any draw.
    rng = np.random.default_rng(cfg.seed)
    plan: list[tuple[int, bool, float | None]] = []
    lo, hi = cfg.angle_range_deg
    for _ in range(target_count):
        src = int(rng.integers(n_sources))
        flip = bool(rng.random() < cfg.p_flip)
        rot = bool(rng.random() < cfg.p_rotate)
        angle = float(rng.uniform(lo, hi))
        plan.append((src, flip, angle if rot else None))
    return plan


def expand(
    sources: list[tuple[str, np.ndarray]],
    target_count: int,
    cfg: AugmentPipelineConfig,
) -> list[tuple[str, np.ndarray, AppliedOps]]:
    """Emit exactly ``target_count`` augmented images with provenance.

    Output ids are ``{parent_id}_aug{n:05d}`` numbered in emission order.
    """
    if not sources:
        raise EmptySourceError("expand() needs at least one source image")
    if target_count < 0:
        raise ValueError(f"target_count must be >= 0, got {target_count}")
    imgs = [(sid, _check_image(img)) for sid, img in sources]
    plan = _draw_plan(len(imgs), target_count, cfg)

    def render(i: int) -> tuple[str, np.ndarray, AppliedOps]:
        src_idx, flip, angle = plan[i]
        parent_id, img = imgs[src_idx]
        out = img
        if flip:
            out = flip_horizontal(out)
        if angle is not None:
            out = rotate(out, angle, cfg.fill)
        elif not flip:
            out = out.copy()
        out_id = f"{parent_id}_aug{i:05d}"
        return out_id, out, AppliedOps(out_id, parent_id, flip, angle)

    workers = _thread_cap()
    if workers > 1 and target_count > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(render, range(target_count)))
    return [render(i) for i in range(target_count)]


def _thread_cap() -> int:
    raw = os.environ.get("OODR_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def write_sidecar(path: str, ops: list[AppliedOps]) -> None:
    """Provenance TSV: output_id, parent_id, flipped (1/0), angle or -."""
    with open(path, "w", encoding="utf-8") as fh:
        for op in ops:
            angle = "-" if op.angle_deg is None else f"{op.angle_deg:.6f}"
            fh.write(f"{op.output_id}\t{op.parent_id}\t{int(op.flipped)}\t{angle}\n")


def load_png(path: str) -> np.ndarray:
    """Read an 8-bit grayscale or RGB PNG into a float array in [0,1]."""
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB" if im.mode in ("RGBA", "P", "CMYK") else "L")
        arr = np.asarray(im, dtype=np.float64) / 255.0
    return arr


def save_png(path: str, img: np.ndarray) -> None:
    img = _check_image(img)
    data = np.round(img * 255.0).astype(np.uint8)
    mode = "L" if data.ndim == 2 else "RGB"
    if data.ndim == 3 and data.shape[2] == 1:
        data = data[:, :, 0]
        mode = "L"
    Image.fromarray(data, mode=mode).save(path, format="PNG")
