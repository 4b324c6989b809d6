"""Locally Competitive Algorithm encoder for convolutional sparse coding.

The encoder iterates membrane potentials mu so that the thresholded state
a = T_lambda(mu) minimizes the sparse-coding energy

    E = 0.5 * sum((x - reconstruct(a, phi))**2) + lambda * sum(|a|)

for a frozen filter bank phi. A dense coordinate-descent LASSO solver is
included as an independent oracle for the same objective.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DivergenceError, ShapeError
from .tensor_core import (AdamState, adam_step, conv3d_transpose, conv3d_valid,
                          conv_output_shape)

__all__ = [
    "LcaConfig",
    "MembraneState",
    "ActivationMap",
    "threshold",
    "energy",
    "lca_encode",
    "fixed_point_residual",
    "lasso_oracle",
]

# Abort the encoder once |mu| exceeds this rather than emit NaN predictions.
MU_LIMIT = 1e6


@dataclass(frozen=True)
class LcaConfig:
    """Encoder settings.

    lam is the sparsity threshold (lambda > 0), membrane_lr the update rate
    eta. optimizer "plain" applies mu += eta * delta directly; "adam" feeds
    -delta to an Adam step so both modes descend the same direction.
    """

    lam: float = 0.05
    inner_steps: int = 300
    membrane_lr: float = 0.01
    optimizer: str = "adam"
    threshold_mode: str = "soft"
    strides: tuple = (1, 1, 1)

    def __post_init__(self):
        if self.lam <= 0:
            raise ValueError(f"lam must be > 0, got {self.lam}")
        if self.inner_steps < 1:
            raise ValueError(f"inner_steps must be >= 1, got {self.inner_steps}")
        if self.membrane_lr <= 0:
            raise ValueError(f"membrane_lr must be > 0, got {self.membrane_lr}")
        if self.optimizer not in ("plain", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.threshold_mode not in ("soft", "hard"):
            raise ValueError(f"unknown threshold_mode {self.threshold_mode!r}")
        if len(self.strides) != 3 or any(s < 1 for s in self.strides):
            raise ValueError(f"strides must be three ints >= 1, got {self.strides}")


@dataclass
class MembraneState:
    """Internal LCA state: membrane potentials plus optional Adam moments."""

    mu: np.ndarray
    adam: Optional[AdamState] = None


@dataclass
class ActivationMap:
    """Sparse code for one clip: a == threshold(mu, lam) for the final mu."""

    a: np.ndarray
    mu: np.ndarray
    lam: float
    threshold_mode: str = "soft"
    energies: Optional[np.ndarray] = None

    @property
    def sparsity(self) -> float:
        """Fraction of nonzero activation entries."""
        return float(np.count_nonzero(self.a)) / self.a.size


def threshold(mu: np.ndarray, lam: float, mode: str = "soft") -> np.ndarray:
    """Threshold membrane potentials into activations.

    soft: sign(mu) * max(|mu| - lam, 0); hard: mu where |mu| > lam else 0.
    """
    if lam <= 0:
        raise ValueError(f"lam must be > 0, got {lam}")
    mu = np.asarray(mu)
    if mode == "soft":
        mag = np.abs(mu) - lam
        np.maximum(mag, 0.0, out=mag)
        return np.sign(mu) * mag
    if mode == "hard":
        return np.where(np.abs(mu) > lam, mu, np.zeros((), dtype=mu.dtype))
    raise ValueError(f"unknown threshold mode {mode!r}")


def _filters_of(phi) -> np.ndarray:
    return np.asarray(getattr(phi, "filters", phi))


def _acts_of(a) -> np.ndarray:
    return np.asarray(getattr(a, "a", a))


def energy(x: np.ndarray, a, phi, lam: float, strides=(1, 1, 1)) -> float:
    """Sparse-coding energy 0.5 * ||x - reconstruct(a, phi)||^2 + lam * ||a||_1."""
    x = np.asarray(x)
    acts = _acts_of(a)
    filters = _filters_of(phi)
    recon = conv3d_transpose(acts, filters, strides, x.shape)
    resid = x - recon
    return float(0.5 * np.vdot(resid, resid).real + lam * np.sum(np.abs(acts)))


def _update_direction(x, filters, mu, a, strides):
    """delta = e * phi + a - mu with e the reconstruction error (Eq.-style drive)."""
    recon = conv3d_transpose(a, filters, strides, x.shape)
    err = x - recon
    delta = conv3d_valid(err, filters, strides)
    delta += a
    delta -= mu
    return delta, err


def lca_encode(x: np.ndarray, phi, config: LcaConfig,
               record_energy: bool = False) -> ActivationMap:
    """Run the LCA inner loop on one clip and return its activation map.

    Membrane potentials start at zero. Each step computes the reconstruction
    error e, the raw update delta = e * phi + a - mu, and then either
    mu += eta * delta (plain) or an Adam step on gradient -delta (adam).
    Raises DivergenceError (naming the step) if mu leaves the finite range.
    """
    x = np.asarray(x)
    filters = _filters_of(phi)
    if x.ndim != 3:
        raise ShapeError(f"clip must be [T, H, W], got {x.shape}")
    st = tuple(config.strides)
    out_shape = (filters.shape[0],) + conv_output_shape(x.shape, filters.shape[1:], st)

    dtype = np.result_type(x, filters)
    mu = np.zeros(out_shape, dtype=dtype)
    state = MembraneState(mu=mu)
    if config.optimizer == "adam":
        state.adam = AdamState.for_params(mu)
    energies = [] if record_energy else None

    eta = config.membrane_lr
    for step in range(config.inner_steps):
        a = threshold(mu, config.lam, config.threshold_mode)
        delta, err = _update_direction(x, filters, mu, a, st)
        if record_energy:
            energies.append(0.5 * float(np.vdot(err, err).real)
                            + config.lam * float(np.sum(np.abs(a))))
        if config.optimizer == "plain":
            mu += eta * delta
        else:
            np.negative(delta, out=delta)
            adam_step(mu, delta, state.adam, eta)
        peak = float(np.max(np.abs(mu)))
        if not np.isfinite(peak) or peak > MU_LIMIT:
            raise DivergenceError(
                f"membrane potentials diverged at step {step} (|mu|max={peak})",
                where=step)

    a = threshold(mu, config.lam, config.threshold_mode)
    if record_energy:
        recon = conv3d_transpose(a, filters, st, x.shape)
        resid = x - recon
        energies.append(0.5 * float(np.vdot(resid, resid).real)
                        + config.lam * float(np.sum(np.abs(a))))
    return ActivationMap(a=a, mu=mu, lam=config.lam,
                         threshold_mode=config.threshold_mode,
                         energies=None if energies is None else np.asarray(energies))


def fixed_point_residual(x: np.ndarray, phi, mu: np.ndarray,
                         config: LcaConfig) -> float:
    """Max-norm of the LCA update direction; zero exactly at a fixed point."""
    x = np.asarray(x)
    filters = _filters_of(phi)
    a = threshold(mu, config.lam, config.threshold_mode)
    delta, _ = _update_direction(x, filters, mu, a, tuple(config.strides))
    return float(np.max(np.abs(delta)))


def lasso_oracle(x: np.ndarray, phi_matrix: np.ndarray, lam: float,
                 max_sweeps: int = 100000, rel_tol: float = 1e-12) -> np.ndarray:
    """Cyclic coordinate descent for the dense LASSO 0.5*||x - Phi a||^2 + lam*||a||_1.

    Independent oracle for the encoder on small problems (<= 64 dims,
    <= 32 atoms). Deterministic cyclic order; stops when the relative
    objective change over a full sweep drops below rel_tol.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    phi = np.asarray(phi_matrix, dtype=np.float64)
    if phi.ndim != 2 or phi.shape[0] != x.size:
        raise ShapeError(f"phi_matrix {phi.shape} incompatible with x of size {x.size}")
    n_dims, n_atoms = phi.shape
    if n_dims > 64 or n_atoms > 32:
        raise ValueError(f"oracle limited to 64 dims / 32 atoms, got {phi.shape}")
    if lam <= 0:
        raise ValueError(f"lam must be > 0, got {lam}")

    col_norm2 = np.einsum("ij,ij->j", phi, phi)
    a = np.zeros(n_atoms)
    resid = x.copy()

    def objective():
        return 0.5 * float(resid @ resid) + lam * float(np.sum(np.abs(a)))

    obj = objective()
    for _ in range(max_sweeps):
        for i in range(n_atoms):
            if col_norm2[i] == 0.0:
                continue
            rho = phi[:, i] @ resid + col_norm2[i] * a[i]
            new_ai = np.sign(rho) * max(abs(rho) - lam, 0.0) / col_norm2[i]
            if new_ai != a[i]:
                resid += phi[:, i] * (a[i] - new_ai)
                a[i] = new_ai
        new_obj = objective()
        if abs(obj - new_obj) <= rel_tol * max(1.0, abs(obj)):
            break
        obj = new_obj
    return a
