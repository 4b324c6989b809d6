"""Dense tensor primitives: valid 3D cross-correlation, its adjoint, and optimizers.

Tensors are plain row-major numpy arrays; float64 is used by tests and
oracles, float32 by training and inference. All functions here are pure in
the sense that they only write to arrays they own or were explicitly asked
to update (the optimizer steps), so concurrent calls on disjoint data are
safe.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError

__all__ = [
    "conv3d_valid",
    "conv3d_transpose",
    "conv3d_weight_grad",
    "conv_output_shape",
    "AdamState",
    "adam_step",
    "sgd_step",
]


def _check_strides(strides):
    if len(strides) != 3 or any(int(s) != s or s < 1 for s in strides):
        raise ShapeError(f"strides must be three positive ints, got {strides!r}")
    return tuple(int(s) for s in strides)


def conv_output_shape(input_shape, filter_shape, strides):
    """Output extents of a valid cross-correlation: floor((n - k) / s) + 1 per axis."""
    strides = _check_strides(strides)
    out = []
    for n, k, s in zip(input_shape, filter_shape, strides):
        if k > n:
            raise ShapeError(
                f"filter extent {k} exceeds input extent {n} "
                f"(input {tuple(input_shape)}, filter {tuple(filter_shape)})")
        out.append((n - k) // s + 1)
    return tuple(out)


def conv3d_valid(x: np.ndarray, filters: np.ndarray,
                 strides=(1, 1, 1)) -> np.ndarray:
    """Valid (no padding) cross-correlation of a T*H*W volume with a filter bank.

    x: [T, H, W]; filters: [K, d, p, q]. Returns [K, T', H', W'] where
    T' = floor((T - d) / stride_t) + 1 and likewise for H', W'.
    """
    x = np.asarray(x)
    filters = np.asarray(filters)
    if x.ndim != 3 or filters.ndim != 4:
        raise ShapeError(
            f"expected 3-d input and 4-d filters, got {x.shape} and {filters.shape}")
    st, sh, sw = _check_strides(strides)
    conv_output_shape(x.shape, filters.shape[1:], (st, sh, sw))
    windows = sliding_window_view(x, filters.shape[1:])[::st, ::sh, ::sw]
    out = np.tensordot(windows, filters, axes=([3, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(np.moveaxis(out, -1, 0))


def conv3d_transpose(activations: np.ndarray, filters: np.ndarray,
                     strides, output_shape) -> np.ndarray:
    """Adjoint of `conv3d_valid`: scatter each activation times its filter.

    activations: [K, T', H', W']; returns [T, H, W] = output_shape. For all
    u, v: <conv3d_valid(u, f), v> == <u, conv3d_transpose(v, f)>.
    """
    activations = np.asarray(activations)
    filters = np.asarray(filters)
    if activations.ndim != 4 or filters.ndim != 4:
        raise ShapeError(
            f"expected 4-d activations and filters, got {activations.shape} "
            f"and {filters.shape}")
    if activations.shape[0] != filters.shape[0]:
        raise ShapeError(
            f"activation atoms {activations.shape[0]} != filters {filters.shape[0]}")
    st, sh, sw = _check_strides(strides)
    output_shape = tuple(int(n) for n in output_shape)
    if len(output_shape) != 3:
        raise ShapeError(f"output_shape must have rank 3, got {output_shape}")
    expected = conv_output_shape(output_shape, filters.shape[1:], (st, sh, sw))
    if expected != activations.shape[1:]:
        raise ShapeError(
            f"output_shape {output_shape} implies activation grid {expected}, "
            f"got {activations.shape[1:]}")

    _, d, p, q = filters.shape
    tp, hp, wp = activations.shape[1:]
    out = np.zeros(output_shape, dtype=np.result_type(activations, filters))
    # contrib[i, j, l, t', h', w'] = sum_k f[k, i, j, l] * a[k, t', h', w'];
    # this layout makes each (i, j, l) slab contiguous for the scatter below.
    contrib = np.tensordot(filters, activations, axes=([0], [0]))
    # Scatter via one contiguous buffer per stride-phase: inside a phase the
    # overlap-add uses plain unit-stride slices, and each output element is
    # interleaved back exactly once.
    for rt in range(st):
        if rt >= d:
            continue
        for rh in range(sh):
            if rh >= p:
                continue
            for rw in range(sw):
                if rw >= q:
                    continue
                sub_shape = ((output_shape[0] - 1 - rt) // st + 1,
                             (output_shape[1] - 1 - rh) // sh + 1,
                             (output_shape[2] - 1 - rw) // sw + 1)
                buf = np.zeros(sub_shape, dtype=out.dtype)
                for i in range(rt, d, st):
                    ii = (i - rt) // st
                    for j in range(rh, p, sh):
                        jj = (j - rh) // sh
                        for l in range(rw, q, sw):
                            ll = (l - rw) // sw
                            buf[ii:ii + tp, jj:jj + hp, ll:ll + wp] += \
                                contrib[i, j, l]
                out[rt::st, rh::sh, rw::sw] = buf
    return out


def conv3d_weight_grad(x: np.ndarray, out_grad: np.ndarray, filter_shape,
                       strides=(1, 1, 1)) -> np.ndarray:
    """Gradient of sum(conv3d_valid(x, f) * out_grad) with respect to f.

    x: [T, H, W]; out_grad: [K, T', H', W']. Returns [K, d, p, q]:
    g[k, i, j, l] = sum over positions of out_grad[k, pos] * x[pos * stride + offset].
    """
    x = np.asarray(x)
    out_grad = np.asarray(out_grad)
    filter_shape = tuple(int(n) for n in filter_shape)
    st, sh, sw = _check_strides(strides)
    expected = conv_output_shape(x.shape, filter_shape[1:], (st, sh, sw))
    if out_grad.shape != (filter_shape[0],) + expected:
        raise ShapeError(
            f"out_grad shape {out_grad.shape} inconsistent with "
            f"{(filter_shape[0],) + expected}")
    windows = sliding_window_view(x, filter_shape[1:])[::st, ::sh, ::sw]
    return np.tensordot(out_grad, windows, axes=([1, 2, 3], [0, 1, 2]))


@dataclass
class AdamState:
    """Adam moment buffers for one parameter tensor."""

    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_params(cls, params: np.ndarray, beta1: float = 0.9,
                   beta2: float = 0.999, epsilon: float = 1e-8) -> "AdamState":
        return cls(first_moment=np.zeros_like(params),
                   second_moment=np.zeros_like(params),
                   step_count=0, beta1=beta1, beta2=beta2, epsilon=epsilon)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState,
              lr: float):
    """One bias-corrected Adam update, applied to `params` in place.

    Returns (params, state) with state.step_count incremented; the moment
    buffers are updated in place as well.
    """
    if params.shape != grads.shape or params.shape != state.first_moment.shape:
        raise ShapeError(
            f"params {params.shape}, grads {grads.shape} and moments "
            f"{state.first_moment.shape} must be shape-identical")
    b1, b2 = state.beta1, state.beta2
    m, v = state.first_moment, state.second_moment
    m *= b1
    m += (1.0 - b1) * grads
    v *= b2
    v += (1.0 - b2) * np.square(grads)
    state.step_count += 1
    t = state.step_count
    m_hat = m / (1.0 - b1 ** t)
    v_hat = v / (1.0 - b2 ** t)
    np.sqrt(v_hat, out=v_hat)
    v_hat += state.epsilon
    m_hat /= v_hat
    m_hat *= lr
    params -= m_hat
    return params, state


def sgd_step(params: np.ndarray, grads: np.ndarray, lr: float) -> np.ndarray:
    """Plain gradient step: returns params - lr * grads (new array)."""
    if params.shape != grads.shape:
        raise ShapeError(f"params {params.shape} != grads {grads.shape}")
    return params - lr * grads
