"""Backbone construction: pretrained or random-init torchvision DenseNet201,
or any caller-supplied module mapping image batches to feature vectors."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

DENSENET_PENULTIMATE_WIDTH = 1920


class BackboneError(ValueError):
    pass


class DimMismatchError(ValueError):
    """Probed feature width differs from the declared one."""


@dataclass(frozen=True)
class ExtractorConfig:
    manifest: str
    out: str
    backbone: str = "densenet201"  # "densenet201" or "pluggable"
    weights: str = "imagenet"  # "imagenet", "none", or a state-dict path
    input_size: int = 224
    batch_size: int = 16
    device: str = "cpu"
    fine_tune: bool = False
    seed: int = 0
    expect_dim: int | None = None

    def __post_init__(self) -> None:
        if self.backbone not in ("densenet201", "pluggable"):
            raise BackboneError(f"unknown backbone {self.backbone!r}")
        if self.input_size < 32:
            raise ValueError("input_size must be at least 32 pixels")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")


class PooledFeatures(nn.Module):
    """Convolutional trunk -> relu -> global average pool -> flat vector."""

    def __init__(self, trunk: nn.Module):
        super().__init__()
        self.trunk = trunk

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = torch.relu(self.trunk(x))
        out = torch.nn.functional.adaptive_avg_pool2d(out, 1)
        return torch.flatten(out, 1)


def _densenet_trunk(weights: str) -> nn.Module:
    import torchvision

    if weights == "imagenet":
        model = torchvision.models.densenet201(
            weights=torchvision.models.DenseNet201_Weights.IMAGENET1K_V1
        )
    else:
        model = torchvision.models.densenet201(weights=None)
        if weights != "none":
            state = torch.load(weights, map_location="cpu", weights_only=True)
            model.load_state_dict(state)
    return model.features


def probe_dim(module: nn.Module, input_size: int, device: str = "cpu") -> int:
    module.eval()
    with torch.no_grad():
        dummy = torch.zeros(1, 3, input_size, input_size, device=device)
        out = module(dummy)
    if out.ndim != 2:
        raise BackboneError(f"backbone must map images to (n, d), got shape {tuple(out.shape)}")
    return int(out.shape[1])


def build_backbone(
    cfg: ExtractorConfig, pluggable: nn.Module | None = None
) -> tuple[nn.Module, int]:
    """Construct the feature module and verify its output width.

    Random init (weights="none") is seeded from cfg.seed so two builds
    produce identical parameters.
    """
    torch.manual_seed(cfg.seed)
    if cfg.backbone == "densenet201":
        if pluggable is not None:
            raise BackboneError("pluggable module given but backbone is densenet201")
        module: nn.Module = PooledFeatures(_densenet_trunk(cfg.weights))
        expected = cfg.expect_dim if cfg.expect_dim is not None else DENSENET_PENULTIMATE_WIDTH
    else:
        if pluggable is None:
            raise BackboneError("backbone 'pluggable' needs a module")
        module = pluggable
        expected = cfg.expect_dim
    module = module.to(cfg.device)
    module.eval()
    dim = probe_dim(module, cfg.input_size, cfg.device)
    if expected is not None and dim != expected:
        raise DimMismatchError(f"backbone emits dim {dim}, declared {expected}")
    return module, dim
