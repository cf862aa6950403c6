"""Whole-backbone fine-tuning with an L2-constrained softmax top layer.

The feature vector is projected onto a sphere of radius alpha before a
bias-free linear classifier and categorical cross-entropy. Adam at lr
0.001, no dropout, no weight decay. Best epoch is the earliest strict
validation-loss minimum; per-epoch checkpoints are optional.
"""

from __future__ import annotations

import copy
import os
from dataclasses import dataclass

import torch
from torch import nn
from torch.nn import functional as F

from .backbones import ExtractorConfig, build_backbone
from .extractor import load_image_tensor
from .manifest import read_manifest


class FinetuneDisabledError(RuntimeError):
    """fine_tune is false in the config."""


class LabelMismatchError(ValueError):
    pass


class DivergenceError(FloatingPointError):
    pass


class SphereSoftmax(nn.Module):
    """Backbone features scaled to the alpha-sphere, then a bias-free head."""

    def __init__(self, backbone: nn.Module, dim: int, num_classes: int, alpha: float):
        super().__init__()
        self.backbone = backbone
        self.alpha = alpha
        self.classifier = nn.Linear(dim, num_classes, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        f = self.backbone(x)
        e = self.alpha * F.normalize(f, p=2.0, dim=1)
        return self.classifier(e)


@dataclass(frozen=True)
class FinetuneResult:
    best_epoch: int
    train_losses: tuple[float, ...]
    val_losses: tuple[float, ...]
    label_names: tuple[str, ...]
    model: SphereSoftmax
    checkpoint_paths: tuple[str, ...]


def _load_labeled(manifest_path: str, input_size: int, label_to_idx: dict[str, int]):
    rows = read_manifest(manifest_path)
    if not rows:
        raise LabelMismatchError(f"{manifest_path}: manifest has no samples")
    xs, ys = [], []
    for row in rows:
        if row.class_label not in label_to_idx:
            raise LabelMismatchError(f"label {row.class_label!r} not in the training label set")
        xs.append(load_image_tensor(row.source_path, input_size))
        ys.append(label_to_idx[row.class_label])
    return torch.stack(xs), torch.tensor(ys, dtype=torch.long)


def finetune(
    cfg: ExtractorConfig,
    train_manifest: str,
    val_manifest: str,
    backbone: nn.Module | None = None,
    epochs: int = 3,
    alpha: float = 16.0,
    lr: float = 0.001,
    checkpoint_dir: str | None = None,
) -> FinetuneResult:
    """Train every backbone parameter plus the head; return the best state."""
    if not cfg.fine_tune:
        raise FinetuneDisabledError("config has fine_tune=false; refusing to update weights")
    if epochs < 1:
        raise ValueError("epochs must be positive")
    labels = sorted({row.class_label for row in read_manifest(train_manifest)})
    if len(labels) < 2:
        raise LabelMismatchError(f"need at least 2 labels, got {labels}")
    label_to_idx = {lab: i for i, lab in enumerate(labels)}

    trunk, dim = build_backbone(cfg, pluggable=backbone)
    torch.manual_seed(cfg.seed)
    model = SphereSoftmax(trunk, dim, len(labels), alpha).to(cfg.device)
    train_x, train_y = _load_labeled(train_manifest, cfg.input_size, label_to_idx)
    val_x, val_y = _load_labeled(val_manifest, cfg.input_size, label_to_idx)
    train_x, train_y = train_x.to(cfg.device), train_y.to(cfg.device)
    val_x, val_y = val_x.to(cfg.device), val_y.to(cfg.device)

    opt = torch.optim.Adam(model.parameters(), lr=lr)
    gen = torch.Generator().manual_seed(cfg.seed)
    train_losses: list[float] = []
    val_losses: list[float] = []
    checkpoints: list[str] = []
    best_epoch = 0
    best_val = float("inf")
    best_state: dict | None = None
    n = train_x.shape[0]
    for epoch in range(1, epochs + 1):
        model.train()
        perm = torch.randperm(n, generator=gen)
        loss_sum = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start: start + cfg.batch_size]
            opt.zero_grad()
            loss = F.cross_entropy(model(train_x[idx]), train_y[idx])
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite training loss at epoch {epoch}")
            loss.backward()
            opt.step()
            loss_sum += loss.detach().item() * len(idx)
        train_losses.append(loss_sum / n)
        model.eval()
        with torch.no_grad():
            val_loss = float(F.cross_entropy(model(val_x), val_y))
        if not torch.isfinite(torch.tensor(val_loss)):
            raise DivergenceError(f"non-finite validation loss at epoch {epoch}")
        val_losses.append(val_loss)
        if checkpoint_dir is not None:
            os.makedirs(checkpoint_dir, exist_ok=True)
            path = os.path.join(checkpoint_dir, f"epoch_{epoch}.pt")
            torch.save(model.state_dict(), path)
            checkpoints.append(path)
        if val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())
    assert best_state is not None
    model.load_state_dict(best_state)
    model.eval()
    return FinetuneResult(
        best_epoch=best_epoch,
        train_losses=tuple(train_losses),
        val_losses=tuple(val_losses),
        label_names=tuple(labels),
        model=model,
        checkpoint_paths=tuple(checkpoints),
    )
