"""Feedforward embedding head with an L2-constrained softmax classifier.

The head maps backbone features through ReLU hidden layers to an embedding
f, rescales it onto the sphere of radius alpha (e = alpha * f / ||f||), and
classifies with a bias-free linear layer under categorical cross-entropy.
Training runs seeded mini-batch Adam and keeps the parameter snapshot of
the epoch with the lowest validation loss. There is no dropout and no
weight decay anywhere in this module.
"""

from __future__ import annotations

import copy
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

CHECKPOINT_MAGIC = b"MHD1"
DEGENERATE_NORM = 1e-12


class DegenerateEmbeddingError(ValueError):
    """Pre-normalization embedding has (numerically) zero norm."""


class DivergenceError(FloatingPointError):
    """Loss or gradients stopped being finite during training."""


class CheckpointError(Exception):
    pass


@dataclass(frozen=True)
class HeadConfig:
    input_dim: int
    hidden_dims: tuple[int, ...] = (256,)
    embed_dim: int = 128
    alpha: float = 16.0
    num_classes: int = 2
    lr: float = 0.001
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 20
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self) -> None:
        dims = (self.input_dim, self.embed_dim, *self.hidden_dims)
        if any(d < 1 for d in dims):
            raise ValueError(f"all dims must be >= 1, got {dims}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.alpha <= 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "HeadConfig":
        d = dict(d)
        d["hidden_dims"] = tuple(d.get("hidden_dims", (256,)))
        return cls(**d)


def init_params(cfg: HeadConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """He-scaled gaussian weights for ReLU layers, zero biases."""
    params: dict[str, np.ndarray] = {}
    fan_in = cfg.input_dim
    for i, width in enumerate(cfg.hidden_dims):
        params[f"h{i}_w"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, width))
        params[f"h{i}_b"] = np.zeros(width)
        fan_in = width
    params["embed_w"] = rng.normal(0.0, np.sqrt(1.0 / fan_in), size=(fan_in, cfg.embed_dim))
    params["cls_w"] = rng.normal(0.0, np.sqrt(1.0 / cfg.embed_dim), size=(cfg.embed_dim, cfg.num_classes))
    return params


def _forward(params: dict[str, np.ndarray], cfg: HeadConfig, x: np.ndarray) -> dict:
    acts = [x]
    a = x
    for i in range(len(cfg.hidden_dims)):
        z = a @ params[f"h{i}_w"] + params[f"h{i}_b"]
        a = np.maximum(z, 0.0)
        acts.append(a)
    f = a @ params["embed_w"]
    r = np.linalg.norm(f, axis=1)
    if np.any(r < DEGENERATE_NORM):
        raise DegenerateEmbeddingError(
            "pre-normalization embedding norm below 1e-12; cannot project to the alpha-sphere"
        )
    e = cfg.alpha * f / r[:, None]
    logits = e @ params["cls_w"]
    return {"acts": acts, "f": f, "r": r, "e": e, "logits": logits}


def _softmax_xent(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    log_probs = shifted - log_z[:, None]
    n = logits.shape[0]
    loss = float(-log_probs[np.arange(n), labels].mean())
    probs = np.exp(log_probs)
    dlogits = probs
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    return loss, dlogits


def batch_loss(params: dict[str, np.ndarray], cfg: HeadConfig, x: np.ndarray, y: np.ndarray) -> float:
    cache = _forward(params, cfg, np.asarray(x, dtype=np.float64))
    loss, _ = _softmax_xent(cache["logits"], np.asarray(y))
    return loss


def loss_and_grads(
    params: dict[str, np.ndarray], cfg: HeadConfig, x: np.ndarray, y: np.ndarray
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean categorical cross-entropy over the batch, with exact gradients.

    Backpropagation goes through the sphere projection with the Jacobian
    (alpha/r) (I - f f^T / r^2) applied to the upstream gradient.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("batch must be a nonempty 2-D array")
    if y.shape != (x.shape[0],):
        raise ValueError("labels must be one integer per batch row")
    if y.min() < 0 or y.max() >= cfg.num_classes:
        raise ValueError(f"labels must lie in [0, {cfg.num_classes})")
    cache = _forward(params, cfg, x)
    loss, dlogits = _softmax_xent(cache["logits"], y)
    grads: dict[str, np.ndarray] = {}
    grads["cls_w"] = cache["e"].T @ dlogits
    de = dlogits @ params["cls_w"].T
    f, r = cache["f"], cache["r"]
    proj = (de * f).sum(axis=1) / (r * r)
    df = (cfg.alpha / r)[:, None] * (de - f * proj[:, None])
    grads["embed_w"] = cache["acts"][-1].T @ df
    da = df @ params["embed_w"].T
    for i in reversed(range(len(cfg.hidden_dims))):
        dz = da * (cache["acts"][i + 1] > 0.0)
        grads[f"h{i}_w"] = cache["acts"][i].T @ dz
        grads[f"h{i}_b"] = dz.sum(axis=0)
        da = dz @ params[f"h{i}_w"].T
    if not np.isfinite(loss) or any(not np.isfinite(g).all() for g in grads.values()):
        raise DivergenceError("non-finite loss or gradient")
    return loss, grads


def init_adam_state(params: dict[str, np.ndarray]) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    return {name: (np.zeros_like(p), np.zeros_like(p)) for name, p in params.items()}


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: dict[str, tuple[np.ndarray, np.ndarray]],
    t: int,
    cfg: HeadConfig,
) -> None:
    """One in-place Adam update with bias correction (step index t >= 1)."""
    if t < 1:
        raise ValueError(f"step index must be >= 1, got {t}")
    b1, b2, eps = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps
    for name, g in grads.items():
        m, v = state[name]
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state[name] = (m, v)
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        params[name] -= cfg.lr * m_hat / (np.sqrt(v_hat) + eps)


@dataclass
class TrainingTrace:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = 0

    def rows(self) -> list[tuple[int, float, float]]:
        return [
            (epoch, tl, vl)
            for epoch, (tl, vl) in enumerate(zip(self.train_loss, self.val_loss), start=1)
        ]


def write_trace(path: str, trace: TrainingTrace) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for epoch, train_loss, val_loss in trace.rows():
            fh.write(f"{epoch}\t{train_loss:.9f}\t{val_loss:.9f}\n")


@dataclass
class MetricHeadModel:
    config: HeadConfig
    params: dict[str, np.ndarray]
    trained_epochs: int = 0
    best_epoch: int = 0

    def embed_batch(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.config.input_dim:
            raise ValueError(
                f"expected (n, {self.config.input_dim}) inputs, got {x.shape}"
            )
        if not np.isfinite(x).all():
            raise ValueError("inputs must be finite")
        return _forward(self.params, self.config, x)["e"]

    def forward_embed(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 1:
            raise ValueError(f"forward_embed takes one vector, got shape {x.shape}")
        return self.embed_batch(x[None, :])[0]

    def logits(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return _forward(self.params, self.config, np.atleast_2d(x))["logits"]

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.logits(x).argmax(axis=1)


def train(
    train_x: np.ndarray,
    train_y: np.ndarray,
    val_x: np.ndarray,
    val_y: np.ndarray,
    cfg: HeadConfig,
) -> tuple[MetricHeadModel, TrainingTrace]:
    """Seeded mini-batch Adam; returns the best-validation-epoch snapshot.

    The epoch train loss is the sample-weighted mean of batch losses, i.e.
    the mean per-sample loss over the epoch as encountered. Ties in the
    validation loss resolve to the earliest epoch.
    """
    train_x = np.asarray(train_x, dtype=np.float64)
    val_x = np.asarray(val_x, dtype=np.float64)
    train_y = np.asarray(train_y, dtype=np.int64)
    val_y = np.asarray(val_y, dtype=np.int64)
    for name, (x, y) in (("train", (train_x, train_y)), ("validation", (val_x, val_y))):
        if x.ndim != 2 or x.shape[0] == 0:
            raise ValueError(f"{name} set must be a nonempty 2-D array")
        if y.shape != (x.shape[0],):
            raise ValueError(f"{name} labels must be one integer per row")
        if y.min() < 0 or y.max() >= cfg.num_classes:
            raise ValueError(f"{name} labels must lie in [0, {cfg.num_classes})")
        if x.shape[1] != cfg.input_dim:
            raise ValueError(f"{name} features have dim {x.shape[1]}, config says {cfg.input_dim}")

    rng = np.random.default_rng(cfg.seed)
    params = init_params(cfg, rng)
    state = init_adam_state(params)
    trace = TrainingTrace()
    n = train_x.shape[0]
    best_val = np.inf
    best_params = copy.deepcopy(params)
    best_epoch = 0
    t = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        loss_sum = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start: start + cfg.batch_size]
            loss, grads = loss_and_grads(params, cfg, train_x[idx], train_y[idx])
            t += 1
            adam_step(params, grads, state, t, cfg)
            loss_sum += loss * len(idx)
        train_loss = loss_sum / n
        val_loss = batch_loss(params, cfg, val_x, val_y)
        if not (np.isfinite(train_loss) and np.isfinite(val_loss)):
            raise DivergenceError(f"non-finite loss at epoch {epoch}")
        trace.train_loss.append(train_loss)
        trace.val_loss.append(val_loss)
        if val_loss < best_val:
            best_val = val_loss
            best_params = copy.deepcopy(params)
            best_epoch = epoch
    trace.best_epoch = best_epoch
    model = MetricHeadModel(
        config=cfg, params=best_params, trained_epochs=cfg.epochs, best_epoch=best_epoch
    )
    return model, trace


def save_checkpoint(path: str, model: MetricHeadModel) -> None:
    """Binary checkpoint: magic, length-prefixed config JSON, then tensors.

    Each tensor is (u32 rank, rank u32 dims, float64 values), little-endian,
    in the order listed under "tensors" in the config block.
    """
    meta = {
        "config": model.config.to_dict(),
        "trained_epochs": model.trained_epochs,
        "best_epoch": model.best_epoch,
        "tensors": list(model.params.keys()),
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(model.params)))
        for name in meta["tensors"]:
            tensor = np.asarray(model.params[name], dtype="<f8")
            fh.write(struct.pack("<I", tensor.ndim))
            fh.write(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
            fh.write(np.ascontiguousarray(tensor).tobytes())


def load_checkpoint(path: str) -> MetricHeadModel:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:4]!r}")
    off = 4
    (meta_len,) = struct.unpack_from("<I", data, off)
    off += 4
    try:
        meta = json.loads(data[off: off + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt config block: {exc}") from exc
    off += meta_len
    (n_tensors,) = struct.unpack_from("<I", data, off)
    off += 4
    names = meta.get("tensors", [])
    if n_tensors != len(names):
        raise CheckpointError(f"{path}: tensor count {n_tensors} != names {len(names)}")
    params: dict[str, np.ndarray] = {}
    for name in names:
        (rank,) = struct.unpack_from("<I", data, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", data, off)
        off += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        end = off + 8 * count
        if end > len(data):
            raise CheckpointError(f"{path}: truncated tensor {name!r}")
        params[name] = np.frombuffer(data[off:end], dtype="<f8").reshape(dims).astype(np.float64)
        off += 8 * count
    cfg = HeadConfig.from_dict(meta["config"])
    return MetricHeadModel(
        config=cfg,
        params=params,
        trained_epochs=int(meta.get("trained_epochs", 0)),
        best_epoch=int(meta.get("best_epoch", 0)),
    )
