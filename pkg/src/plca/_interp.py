"""Bilinear sampling helpers shared by ROI cropping and clip augmentation."""

from __future__ import annotations

import numpy as np

__all__ = ["bilinear_sample", "resize_bilinear", "rotate_frame"]


def bilinear_sample(frame: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample frame[y, x] at fractional coordinates; zero outside the support."""
    h, w = frame.shape
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    wy = ys - y0
    wx = xs - x0

    out = np.zeros(ys.shape, dtype=frame.dtype)
    for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
        yy = y0 + dy
        xx = x0 + dx
        weight = (wy if dy else 1.0 - wy) * (wx if dx else 1.0 - wx)
        inside = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        vals = frame[np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)]
        out += np.where(inside, weight * vals, 0.0).astype(frame.dtype, copy=False)
    return out


def resize_bilinear(frame: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize with half-pixel-center alignment (src = (dst + 0.5)*scale - 0.5)."""
    h, w = frame.shape
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    # Clamp instead of zero-filling: edge samples should repeat the border.
    ys = np.clip(ys, 0.0, h - 1.0)
    xs = np.clip(xs, 0.0, w - 1.0)
    grid_y, grid_x = np.meshgrid(ys, xs, indexing="ij")
    return bilinear_sample(frame, grid_y, grid_x)


def rotate_frame(frame: np.ndarray, angle_deg: float) -> np.ndarray:
    """Rotate about the frame center, bilinear interpolation, zero fill outside."""
    h, w = frame.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    theta = np.deg2rad(angle_deg)
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    # Inverse mapping: output pixel pulls from the un-rotated source location.
    dy = yy - cy
    dx = xx - cx
    src_y = cy + cos_t * dy - sin_t * dx
    src_x = cx + sin_t * dy + cos_t * dx
    return bilinear_sample(frame, src_y, src_x)
