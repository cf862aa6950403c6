import math

import numpy as np
import pytest
import torch
from conftest import TinyBackbone, make_two_class_images, write_manifest

from octfeat.backbones import ExtractorConfig
from octfeat.extractor import extract
from octfeat.featio import read_feat
from octfeat.finetune import (
    FinetuneDisabledError,
    LabelMismatchError,
    SphereSoftmax,
    finetune,
)


def _cfg(tmp_path, **kw):
    base = dict(
        manifest=str(tmp_path / "test.tsv"),
        out=str(tmp_path / "f.feat"),
        backbone="pluggable",
        weights="none",
        input_size=32,
        batch_size=8,
        fine_tune=True,
        seed=0,
    )
    base.update(kw)
    return ExtractorConfig(**base)


def _toy_manifests(tmp_path, per_class=8):
    rows = make_two_class_images(tmp_path, per_class, seed=4)
    train = rows[: len(rows) // 2]
    val = rows[len(rows) // 2:]
    write_manifest(tmp_path / "train.tsv", train)
    write_manifest(tmp_path / "val.tsv", val)
    return train, val


def test_guard_refuses_without_flag(tmp_path, tiny_backbone):
    _toy_manifests(tmp_path)
    cfg = _cfg(tmp_path, fine_tune=False)
    with pytest.raises(FinetuneDisabledError):
        finetune(cfg, str(tmp_path / "train.tsv"), str(tmp_path / "val.tsv"),
                 backbone=tiny_backbone)


def test_needs_two_labels(tmp_path, tiny_backbone):
    rows = make_two_class_images(tmp_path, 4, seed=4)
    only_left = [r for r in rows if r[1] == "left"]
    write_manifest(tmp_path / "train.tsv", only_left)
    write_manifest(tmp_path / "val.tsv", only_left)
    with pytest.raises(LabelMismatchError):
        finetune(_cfg(tmp_path), str(tmp_path / "train.tsv"), str(tmp_path / "val.tsv"),
                 backbone=tiny_backbone)


def test_val_label_outside_training_set(tmp_path, tiny_backbone):
    train, val = _toy_manifests(tmp_path)
    stray = [(rid, "mystery", src) for rid, _, src in val]
    write_manifest(tmp_path / "val.tsv", stray, labels=["mystery"])
    with pytest.raises(LabelMismatchError):
        finetune(_cfg(tmp_path), str(tmp_path / "train.tsv"), str(tmp_path / "val.tsv"),
                 backbone=tiny_backbone)


def test_three_epochs_contract(tmp_path, tiny_backbone):
    _toy_manifests(tmp_path)
    result = finetune(
        _cfg(tmp_path),
        str(tmp_path / "train.tsv"),
        str(tmp_path / "val.tsv"),
        backbone=tiny_backbone,
        epochs=3,
        checkpoint_dir=str(tmp_path / "ckpt"),
    )
    assert result.best_epoch in (1, 2, 3)
    assert len(result.val_losses) == 3
    assert all(math.isfinite(v) for v in result.val_losses)
    assert len(result.checkpoint_paths) == 3
    for p in result.checkpoint_paths:
        state = torch.load(p, map_location="cpu", weights_only=True)
        assert "classifier.weight" in state
    assert result.label_names == ("left", "right")
    # returned model carries the best epoch's validation loss
    assert min(result.val_losses) == result.val_losses[result.best_epoch - 1]


def test_best_epoch_is_earliest_strict_minimum(tmp_path, tiny_backbone):
    _toy_manifests(tmp_path)
    result = finetune(
        _cfg(tmp_path),
        str(tmp_path / "train.tsv"),
        str(tmp_path / "val.tsv"),
        backbone=tiny_backbone,
        epochs=4,
    )
    first_min = 1 + result.val_losses.index(min(result.val_losses))
    assert result.best_epoch == first_min


def _linear_probe_accuracy(values: np.ndarray, labels: np.ndarray) -> float:
    # least-squares probe onto one-hot targets, evaluated in-sample
    x = np.hstack([values, np.ones((values.shape[0], 1))])
    onehot = np.eye(2)[labels]
    w, *_ = np.linalg.lstsq(x, onehot, rcond=None)
    pred = (x @ w).argmax(axis=1)
    return float((pred == labels).mean())


def test_finetune_improves_linear_probe(tmp_path):
    rows = make_two_class_images(tmp_path, 10, seed=9)
    write_manifest(tmp_path / "train.tsv", rows[:10])
    write_manifest(tmp_path / "val.tsv", rows[10:])
    write_manifest(tmp_path / "test.tsv", rows)
    label_idx = np.array([0 if r[1] == "left" else 1 for r in rows])

    torch.manual_seed(123)
    before = TinyBackbone(dim=4)
    cfg = _cfg(tmp_path, out=str(tmp_path / "before.feat"))
    extract(cfg, backbone=before)
    _, feats_before = read_feat(str(tmp_path / "before.feat"))

    result = finetune(
        cfg,
        str(tmp_path / "train.tsv"),
        str(tmp_path / "val.tsv"),
        backbone=before,
        epochs=25,
    )
    cfg_after = _cfg(tmp_path, out=str(tmp_path / "after.feat"))
    extract(cfg_after, backbone=result.model.backbone)
    _, feats_after = read_feat(str(tmp_path / "after.feat"))

    acc_before = _linear_probe_accuracy(feats_before, label_idx)
    acc_after = _linear_probe_accuracy(feats_after, label_idx)
    assert acc_after > acc_before or acc_after == 1.0


def test_sphere_head_norms(tiny_backbone):
    torch.manual_seed(0)
    model = SphereSoftmax(tiny_backbone, dim=8, num_classes=2, alpha=5.0)
    x = torch.rand(3, 3, 32, 32)
    f = model.backbone(x)
    e = model.alpha * torch.nn.functional.normalize(f, p=2.0, dim=1)
    assert torch.allclose(e.norm(dim=1), torch.full((3,), 5.0), atol=1e-5)
    assert model.classifier.bias is None
