"""Unsupervised dictionary learning: alternate frozen-filter LCA encoding with
SGD filter updates on the reconstruction term, keeping atoms at unit norm."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import DivergenceError, ShapeError
from .lca import LcaConfig, lca_encode
from .tensor_core import conv3d_transpose, conv3d_weight_grad, sgd_step

__all__ = [
    "Dictionary",
    "DictLearnConfig",
    "init_dictionary",
    "filter_gradient",
    "reconstruction_error",
    "learn",
    "compare_dictionaries",
    "transfer_load",
]

SOURCE_TAGS = ("random", "phantom_task", "transfer")


@dataclass
class Dictionary:
    """A bank of unit-norm 3D filters plus provenance metadata."""

    filters: np.ndarray  # [K, d, p, q]
    lambda_trained_with: float = 0.0
    epochs_trained: int = 0
    source_tag: str = "random"
    config_echo: dict = field(default_factory=dict)

    def __post_init__(self):
        self.filters = np.asarray(self.filters)
        if self.filters.ndim != 4 or min(self.filters.shape) < 1:
            raise ShapeError(f"filters must be [K, d, p, q], got {self.filters.shape}")
        if self.source_tag not in SOURCE_TAGS:
            raise ValueError(f"source_tag must be one of {SOURCE_TAGS}")

    @property
    def k(self) -> int:
        return self.filters.shape[0]

    @property
    def atom_shape(self) -> tuple:
        return self.filters.shape[1:]

    def atom_norms(self) -> np.ndarray:
        return np.sqrt(np.einsum("kijl,kijl->k", self.filters, self.filters))


@dataclass
class DictLearnConfig:
    filter_lr: float = 3e-3
    epochs: int = 100
    batch_size: int = 32
    lca: LcaConfig = field(default_factory=LcaConfig)
    seed: int = 0

    def __post_init__(self):
        if self.filter_lr <= 0 or self.batch_size < 1:
            raise ValueError("filter_lr must be > 0 and batch_size >= 1")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")


def _normalize_atoms(filters: np.ndarray) -> np.ndarray:
    norms = np.sqrt(np.einsum("kijl,kijl->k", filters, filters))
    np.maximum(norms, np.finfo(filters.dtype).tiny, out=norms)
    return filters / norms[:, None, None, None]


def init_dictionary(k: int, d: int, p: int, q: int, seed: int = 0,
                    dtype=np.float64) -> Dictionary:
    """Random dictionary: i.i.d. standard-normal atoms, L2-normalized."""
    if min(k, d, p, q) < 1:
        raise ValueError(f"dictionary dims must be positive, got {(k, d, p, q)}")
    rng = np.random.default_rng(seed)
    filters = rng.standard_normal((k, d, p, q)).astype(dtype)
    return Dictionary(filters=_normalize_atoms(filters))


def filter_gradient(x: np.ndarray, a, phi, strides=(1, 1, 1)) -> np.ndarray:
    """Gradient of the energy with respect to the filters, activations frozen.

    dE/dPhi = -(reconstruction error correlated with the activations); the
    sparsity term does not depend on Phi.
    """
    x = np.asarray(x)
    acts = np.asarray(getattr(a, "a", a))
    filters = np.asarray(getattr(phi, "filters", phi))
    recon = conv3d_transpose(acts, filters, strides, x.shape)
    err = x - recon
    return -conv3d_weight_grad(err, acts, filters.shape, strides)


def reconstruction_error(x: np.ndarray, a, phi, strides=(1, 1, 1)) -> float:
    """Mean squared error between x and its reconstruction from a."""
    x = np.asarray(x)
    acts = np.asarray(getattr(a, "a", a))
    filters = np.asarray(getattr(phi, "filters", phi))
    recon = conv3d_transpose(acts, filters, strides, x.shape)
    diff = x - recon
    return float(np.vdot(diff, diff).real) / x.size


def _encode_many(clips, filters, lca_config, threads):
    if threads > 1 and len(clips) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(lambda c: lca_encode(c, filters, lca_config), clips))
    return [lca_encode(c, filters, lca_config) for c in clips]


def learn(clips, init: Dictionary, config: DictLearnConfig, threads: int = 1):
    """Learn a dictionary from unlabeled clips.

    Per epoch: seeded shuffle, then for each batch encode every clip with
    the filters frozen, average the filter gradients at 64-bit, apply one
    SGD step, and renormalize every atom to unit norm. Returns the learned
    Dictionary and a list of per-epoch metric dicts (mean reconstruction
    MSE and mean sparsity measured during the epoch).
    """
    clips = [np.asarray(c) for c in clips]
    if not clips:
        raise ValueError("dataset of clips is empty")
    shape0 = clips[0].shape
    if any(c.shape != shape0 for c in clips):
        raise ShapeError("all clips must share one shape")

    filters = init.filters.copy()
    strides = tuple(config.lca.strides)
    rng = np.random.default_rng(config.seed)
    metrics = []

    for epoch in range(config.epochs):
        order = rng.permutation(len(clips))
        mse_sum = 0.0
        sparsity_sum = 0.0
        for start in range(0, len(order), config.batch_size):
            batch_idx = order[start:start + config.batch_size]
            batch = [clips[i] for i in batch_idx]
            maps = _encode_many(batch, filters, config.lca, threads)
            grad64 = np.zeros(filters.shape, dtype=np.float64)
            for clip, amap in zip(batch, maps):
                grad64 += filter_gradient(clip, amap.a, filters, strides)
                mse_sum += reconstruction_error(clip, amap.a, filters, strides)
                sparsity_sum += amap.sparsity
            grad64 /= len(batch)
            filters = sgd_step(filters, grad64.astype(filters.dtype), config.filter_lr)
            norms = np.sqrt(np.einsum("kijl,kijl->k", filters, filters))
            if not np.all(np.isfinite(norms)) or np.any(norms == 0.0):
                raise DivergenceError(
                    f"filter update diverged in epoch {epoch} "
                    f"(atom norms out of range)", where=epoch)
            filters = filters / norms[:, None, None, None]
        if not np.all(np.isfinite(filters)):
            raise DivergenceError(f"filters became non-finite in epoch {epoch}",
                                  where=epoch)
        metrics.append({
            "epoch": epoch + 1,
            "mse": mse_sum / len(clips),
            "sparsity": sparsity_sum / len(clips),
        })

    return Dictionary(
        filters=filters,
        lambda_trained_with=config.lca.lam,
        epochs_trained=init.epochs_trained + config.epochs,
        source_tag="phantom_task" if config.epochs > 0 else init.source_tag,
        config_echo=dict(init.config_echo),
    ), metrics


def compare_dictionaries(dict_a: Dictionary, dict_b: Dictionary, eval_clips,
                         lca_config: LcaConfig, threads: int = 1) -> dict:
    """Encode the same clips under two dictionaries and report MSE/sparsity."""
    if dict_a.filters.shape != dict_b.filters.shape:
        raise ShapeError(
            f"dictionary shapes differ: {dict_a.filters.shape} vs "
            f"{dict_b.filters.shape}")
    strides = tuple(lca_config.strides)
    report = {}
    for tag, dct in (("a", dict_a), ("b", dict_b)):
        maps = _encode_many(list(eval_clips), dct.filters, lca_config, threads)
        mses = [reconstruction_error(c, m.a, dct.filters, strides)
                for c, m in zip(eval_clips, maps)]
        report[f"mse_{tag}"] = float(np.mean(mses))
        report[f"sparsity_{tag}"] = float(np.mean([m.sparsity for m in maps]))
    return report


def transfer_load(path, expected_shape=None) -> Dictionary:
    """Load a dictionary checkpoint for reuse on another task.

    Validates the (K, d, p, q) shape when given and retags the dictionary
    as a transfer source.
    """
    from . import io_formats

    loaded = io_formats.load_checkpoint(path)
    if not isinstance(loaded, Dictionary):
        raise ShapeError(f"{path}: checkpoint does not contain a dictionary")
    if expected_shape is not None and loaded.filters.shape != tuple(expected_shape):
        raise ShapeError(
            f"{path}: dictionary shape {loaded.filters.shape} does not match "
            f"required {tuple(expected_shape)}")
    loaded.source_tag = "transfer"
    return loaded
