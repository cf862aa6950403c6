import numpy as np
import pytest
import torch
from PIL import Image
from torch import nn


class TinyBackbone(nn.Module):
    """Small conv trunk for tests; output dim is the channel count."""

    def __init__(self, dim: int = 8):
        super().__init__()
        self.conv1 = nn.Conv2d(3, 16, 3, padding=1)
        self.conv2 = nn.Conv2d(16, dim, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = torch.relu(self.conv1(x))
        h = torch.relu(self.conv2(h))
        h = torch.nn.functional.adaptive_avg_pool2d(h, 1)
        return torch.flatten(h, 1)


@pytest.fixture
def tiny_backbone():
    torch.manual_seed(0)
    return TinyBackbone()


def write_png(path, arr: np.ndarray) -> None:
    Image.fromarray(arr.astype(np.uint8)).save(path)


def write_manifest(path, rows, labels=None) -> None:
    """rows: (id, class, source_path) triples."""
    if labels is None:
        labels = sorted({r[1] for r in rows})
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("#labels: " + ",".join(labels) + "\n")
        for rid, label, src in rows:
            fh.write(f"{rid}\t{label}\t{src}\t-\n")


def make_images(tmp_path, count: int, seed: int = 0, side: int = 32, prefix: str = "img"):
    """Random grayscale-ish PNGs plus manifest rows, one class."""
    rng = np.random.default_rng(seed)
    rows = []
    for i in range(count):
        arr = rng.integers(0, 256, size=(side, side, 3))
        p = tmp_path / f"{prefix}{i}.png"
        write_png(p, arr)
        rows.append((f"{prefix}{i}", "normal_a", str(p)))
    return rows


def make_two_class_images(tmp_path, per_class: int, seed: int = 0, side: int = 32):
    """Separable toy classes: bright left half vs bright right half."""
    rng = np.random.default_rng(seed)
    rows = []
    for i in range(per_class):
        for label, bright_left in (("left", True), ("right", False)):
            arr = rng.integers(0, 60, size=(side, side, 3))
            half = slice(0, side // 2) if bright_left else slice(side // 2, side)
            arr[:, half, :] += 180
            p = tmp_path / f"{label}{i}.png"
            write_png(p, np.clip(arr, 0, 255))
            rows.append((f"{label}{i}", label, str(p)))
    return rows
