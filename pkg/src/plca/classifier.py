"""Small supervised head over sparse activation maps.

Maxpool -> two valid 3x3 conv+ReLU stages (with a second maxpool between) ->
global average pool -> two dense layers with dropout -> one raw logit.
Gradients are exact reverse-mode, written out by hand and checked against
finite differences in the tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .lca import ActivationMap
from .tensor_core import (AdamState, adam_step, conv3d_transpose, conv3d_valid,
                          conv3d_weight_grad)
from ._interp import rotate_frame

__all__ = [
    "ClassifierParams",
    "ClfTrainConfig",
    "init_classifier_params",
    "forward",
    "backward",
    "bce_loss",
    "sigmoid",
    "train_classifier",
    "augment_clip",
    "hflip_clip",
]

PARAM_NAMES = ("conv1_w", "conv1_b", "conv2_w", "conv2_b",
               "fc1_w", "fc1_b", "fc2_w", "fc2_b")


@dataclass
class ClassifierParams:
    conv1_w: np.ndarray  # [c1, K, 3, 3]
    conv1_b: np.ndarray  # [c1]
    conv2_w: np.ndarray  # [c2, c1, 3, 3]
    conv2_b: np.ndarray  # [c2]
    fc1_w: np.ndarray    # [hidden, c2]
    fc1_b: np.ndarray    # [hidden]
    fc2_w: np.ndarray    # [1, hidden]
    fc2_b: np.ndarray    # [1]
    config_echo: dict = field(default_factory=dict)

    @property
    def k_atoms(self) -> int:
        return self.conv1_w.shape[1]

    def tensors(self) -> dict:
        return {name: getattr(self, name) for name in PARAM_NAMES}


@dataclass
class ClfTrainConfig:
    lr: float = 5e-4
    epochs: int = 25
    batch_size: int = 32
    dropout_rate: float = 0.5
    seed: int = 0
    augment: bool = True
    # Extra augmented copies encoded per training clip when augment is on;
    # consumed by the clip-preparation stage, not by train_classifier itself.
    augment_copies: int = 2

    def __post_init__(self):
        if not (0.0 <= self.dropout_rate < 1.0):
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.lr <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("lr must be > 0, epochs and batch_size >= 1")


def init_classifier_params(k_atoms: int, c1: int = 16, c2: int = 32,
                           hidden: int = 64, seed: int = 0,
                           dtype=np.float32) -> ClassifierParams:
    """He-initialized weights, zero biases, one output logit."""
    rng = np.random.default_rng(seed)

    def he(shape, fan_in):
        return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)

    return ClassifierParams(
        conv1_w=he((c1, k_atoms, 3, 3), k_atoms * 9),
        conv1_b=np.zeros(c1, dtype=dtype),
        conv2_w=he((c2, c1, 3, 3), c1 * 9),
        conv2_b=np.zeros(c2, dtype=dtype),
        fc1_w=he((hidden, c2), c2),
        fc1_b=np.zeros(hidden, dtype=dtype),
        fc2_w=he((1, hidden), hidden),
        fc2_b=np.zeros(1, dtype=dtype),
    )


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out if out.ndim else float(out)


def bce_loss(logit: float, label: int) -> float:
    """Binary cross-entropy from a raw logit, log-sum-exp stabilized."""
    if label not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {label!r}")
    z = float(logit)
    return max(z, 0.0) - z * label + np.log1p(np.exp(-abs(z)))


def _maxpool2(x: np.ndarray):
    """2x2 stride-2 maxpool over [C, H, W]; trailing odd row/col is dropped.

    Returns (pooled, flat argmax in {0..3} per window) for the backward pass;
    ties resolve to the first window position in scan order.
    """
    c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    win = x[:, :h2 * 2, :w2 * 2].reshape(c, h2, 2, w2, 2)
    win = win.transpose(0, 1, 3, 2, 4).reshape(c, h2, w2, 4)
    idx = win.argmax(axis=3)
    pooled = np.take_along_axis(win, idx[..., None], axis=3)[..., 0]
    return pooled, idx


def _maxpool2_backward(grad: np.ndarray, idx: np.ndarray, in_shape) -> np.ndarray:
    c, h, w = in_shape
    h2, w2 = h // 2, w // 2
    win_grad = np.zeros((c, h2, w2, 4), dtype=grad.dtype)
    np.put_along_axis(win_grad, idx[..., None], grad[..., None], axis=3)
    out = np.zeros(in_shape, dtype=grad.dtype)
    out[:, :h2 * 2, :w2 * 2] = (win_grad.reshape(c, h2, w2, 2, 2)
                                .transpose(0, 1, 3, 2, 4)
                                .reshape(c, h2 * 2, w2 * 2))
    return out


def _conv2(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    # [C_in, H, W] with [C_out, C_in, 3, 3] -> [C_out, H-2, W-2]
    return conv3d_valid(x, w, (1, 1, 1))[:, 0] + b[:, None, None]


def _as_map_2d(a) -> np.ndarray:
    acts = np.asarray(a.a if isinstance(a, ActivationMap) else a)
    if acts.ndim == 4:
        if acts.shape[1] != 1:
            raise ShapeError(
                f"classifier head requires a single temporal slice, got T'="
                f"{acts.shape[1]}")
        acts = acts[:, 0]
    if acts.ndim != 3:
        raise ShapeError(f"activation map must be [K, T', H, W] or [K, H, W], "
                         f"got shape {acts.shape}")
    return acts


def _forward_cached(acts: np.ndarray, params: ClassifierParams,
                    dropout_mask: np.ndarray | None):
    m0 = acts
    if m0.shape[1] < 6 or m0.shape[2] < 6:
        raise ShapeError(f"activation map spatial dims {m0.shape[1:]} too small "
                         "for pool+conv stack (needs >= 6)")
    p0, idx0 = _maxpool2(m0)
    if p0.shape[1] < 3 or p0.shape[2] < 3:
        raise ShapeError(f"pooled map {p0.shape[1:]} too small for 3x3 conv")
    z1 = _conv2(p0, params.conv1_w, params.conv1_b)
    r1 = np.maximum(z1, 0.0)
    p1, idx1 = _maxpool2(r1)
    if p1.shape[1] < 3 or p1.shape[2] < 3:
        raise ShapeError(f"second pooled map {p1.shape[1:]} too small for 3x3 conv")
    z2 = _conv2(p1, params.conv2_w, params.conv2_b)
    r2 = np.maximum(z2, 0.0)
    g = r2.mean(axis=(1, 2))
    z3 = params.fc1_w @ g + params.fc1_b
    h = np.maximum(z3, 0.0)
    hd = h if dropout_mask is None else h * dropout_mask
    logit = float((params.fc2_w @ hd + params.fc2_b)[0])
    cache = (m0, p0, idx0, z1, r1, p1, idx1, z2, r2, g, z3, h, hd, dropout_mask)
    return logit, cache


def _dropout_mask(params: ClassifierParams, rate: float, rng) -> np.ndarray | None:
    if rate == 0.0:
        return None
    hidden = params.fc1_b.shape[0]
    keep = (rng.random(hidden) >= rate)
    return keep.astype(params.fc1_b.dtype) / (1.0 - rate)


DEFAULT_DROPOUT_RATE = 0.5


def forward(a, params: ClassifierParams, mode: str = "eval", rng=None,
            dropout_rate: float = DEFAULT_DROPOUT_RATE) -> float:
    """Raw logit for one activation map. Train mode draws a seeded dropout mask."""
    acts = _as_map_2d(a)
    if mode == "train":
        if rng is None:
            raise ValueError("train mode requires an rng for the dropout mask")
        mask = _dropout_mask(params, dropout_rate, rng)
    elif mode == "eval":
        mask = None
    else:
        raise ValueError(f"unknown mode {mode!r}")
    logit, _ = _forward_cached(acts, params, mask)
    return logit


def backward(a, params: ClassifierParams, label: int, mode: str = "eval",
             rng=None, dropout_rate: float = DEFAULT_DROPOUT_RATE,
             loss_scale: float = 1.0):
    """Loss, logit, and exact gradients of loss_scale * bce for one sample.

    In train mode the dropout mask is drawn from `rng` exactly as the
    forward pass draws it, so forward and backward see the same network.
    Returns (grads keyed like ClassifierParams.tensors(), loss, logit).
    """
    acts = _as_map_2d(a)
    if mode == "train":
        if rng is None:
            raise ValueError("train mode requires an rng for the dropout mask")
        mask = _dropout_mask(params, dropout_rate, rng)
    elif mode == "eval":
        mask = None
    else:
        raise ValueError(f"unknown mode {mode!r}")
    if label not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {label!r}")

    logit, cache = _forward_cached(acts, params, mask)
    (m0, p0, idx0, z1, r1, p1, idx1, z2, r2, g, z3, h, hd, mask) = cache
    loss = loss_scale * bce_loss(logit, label)

    dz = loss_scale * (sigmoid(logit) - label)
    dtype = params.fc2_w.dtype
    d_fc2_w = (dz * hd)[None, :].astype(dtype)
    d_fc2_b = np.array([dz], dtype=dtype)
    d_hd = (dz * params.fc2_w[0]).astype(dtype)
    d_h = d_hd if mask is None else d_hd * mask
    d_z3 = d_h * (z3 > 0)
    d_fc1_w = np.outer(d_z3, g).astype(dtype)
    d_fc1_b = d_z3.astype(dtype)
    d_g = params.fc1_w.T @ d_z3
    d_r2 = np.broadcast_to((d_g / (r2.shape[1] * r2.shape[2]))[:, None, None],
                           r2.shape)
    d_z2 = (d_r2 * (z2 > 0)).astype(dtype)
    d_conv2_w = conv3d_weight_grad(p1, d_z2[:, None], params.conv2_w.shape)
    d_conv2_b = d_z2.sum(axis=(1, 2))
    d_p1 = conv3d_transpose(d_z2[:, None], params.conv2_w, (1, 1, 1), p1.shape)
    d_r1 = _maxpool2_backward(d_p1, idx1, r1.shape)
    d_z1 = (d_r1 * (z1 > 0)).astype(dtype)
    d_conv1_w = conv3d_weight_grad(p0, d_z1[:, None], params.conv1_w.shape)
    d_conv1_b = d_z1.sum(axis=(1, 2))

    grads = {
        "conv1_w": d_conv1_w.astype(dtype), "conv1_b": d_conv1_b.astype(dtype),
        "conv2_w": d_conv2_w.astype(dtype), "conv2_b": d_conv2_b.astype(dtype),
        "fc1_w": d_fc1_w, "fc1_b": d_fc1_b,
        "fc2_w": d_fc2_w, "fc2_b": d_fc2_b,
    }
    return grads, loss, logit


def train_classifier(dataset, config: ClfTrainConfig):
    """Minibatch Adam training over (activation map, label) pairs.

    Seeded shuffling and per-sample dropout masks make training fully
    deterministic for a fixed config. Returns the trained parameters and
    per-epoch metrics (mean loss, running accuracy).
    """
    if not dataset:
        raise ValueError("training dataset is empty")
    labels = {label for _, label in dataset}
    if labels != {0, 1}:
        raise ValueError(f"training needs both classes, got labels {sorted(labels)}")

    maps = [_as_map_2d(a) for a, _ in dataset]
    ys = [int(label) for _, label in dataset]
    dtype = maps[0].dtype
    params = init_classifier_params(maps[0].shape[0], seed=config.seed, dtype=dtype)
    states = {name: AdamState.for_params(t) for name, t in params.tensors().items()}

    rng = np.random.default_rng(config.seed)
    metrics = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(maps))
        loss_sum = 0.0
        correct = 0
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            acc = {name: np.zeros(t.shape, dtype=np.float64)
                   for name, t in params.tensors().items()}
            for i in batch:
                sample_rng = np.random.default_rng((config.seed, epoch, int(i)))
                grads, loss, logit = backward(
                    maps[i], params, ys[i], mode="train", rng=sample_rng,
                    dropout_rate=config.dropout_rate)
                for name in acc:
                    acc[name] += grads[name]
                loss_sum += loss
                correct += int((logit >= 0.0) == bool(ys[i]))
            tensors = params.tensors()
            for name in acc:
                grad = (acc[name] / len(batch)).astype(dtype)
                adam_step(tensors[name], grad, states[name], config.lr)
        metrics.append({
            "epoch": epoch + 1,
            "loss": loss_sum / len(maps),
            "accuracy": correct / len(maps),
        })
    return params, metrics


def hflip_clip(clip: np.ndarray) -> np.ndarray:
    """Mirror every frame left-right (exact, involutive)."""
    return np.ascontiguousarray(clip[:, :, ::-1])


def augment_clip(clip: np.ndarray, rng) -> np.ndarray:
    """Random rotation in [-45, +45] degrees plus a coin-flip horizontal mirror.

    The same rotation angle is applied to all frames (bilinear, zero fill);
    draws exactly one uniform angle and one flip decision from `rng`.
    """
    clip = np.asarray(clip)
    if clip.ndim != 3:
        raise ShapeError(f"clip must be [T, H, W], got {clip.shape}")
    angle = float(rng.uniform(-45.0, 45.0))
    flip = bool(rng.random() < 0.5)
    out = np.stack([rotate_frame(frame, angle) for frame in clip])
    if flip:
        out = hflip_clip(out)
    return out.astype(clip.dtype, copy=False)
