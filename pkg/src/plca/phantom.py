"""Synthetic pleural-phantom videos: a bright horizontal band over a dark
background with sub-band speckle that slides, pulses, or stays still.

Positive-class videos (label 0) show no movement; negative-class videos
(label 1) show either horizontal speckle sliding or a rhythmic vertical
band oscillation.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .pipeline import VideoTensor

__all__ = ["PhantomSpec", "generate_video", "generate_dataset"]

BAND_PEAK = 0.3
BACKGROUND = 0.03
SPECKLE_AMPLITUDE = 0.15
# Speck seeds are smoothed into blobs a few pixels wide, mimicking the
# point-spread blur of real speckle; raw per-pixel texture is white noise,
# which no small dictionary can represent sparsely.
SPECKLE_BLUR_SIGMA = 1.3

MOVEMENTS = ("sliding", "pulse", "none")


def _gaussian_blur_2d(img: np.ndarray, sigma: float) -> np.ndarray:
    radius = max(1, int(np.ceil(3.0 * sigma)))
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (t / sigma) ** 2)
    kernel /= kernel.sum()
    pad_r = np.pad(img, ((0, 0), (radius, radius)), mode="wrap")
    out = np.apply_along_axis(lambda r: np.convolve(r, kernel, mode="valid"), 1,
                              pad_r)
    pad_c = np.pad(out, ((radius, radius), (0, 0)), mode="wrap")
    return np.apply_along_axis(lambda c: np.convolve(c, kernel, mode="valid"), 0,
                               pad_c)


@dataclass
class PhantomSpec:
    T: int = 60
    H: int = 256
    W: int = 384
    band_row: Optional[int] = None  # defaults to 0.45 * H
    band_sigma: float = 3.0
    movement: str = "sliding"
    slide_speed: float = 2.0
    pulse_amplitude: float = 0.0
    pulse_period: float = 15.0
    speckle_density: float = 0.10
    noise_sigma: float = 0.015
    seed: int = 0

    def __post_init__(self):
        if self.band_row is None:
            self.band_row = int(round(0.45 * self.H))
        if self.T < 5 or self.H < 16 or self.W < 16:
            raise ValueError(f"video too small: T={self.T}, H={self.H}, W={self.W}")
        if self.movement not in MOVEMENTS:
            raise ValueError(f"movement must be one of {MOVEMENTS}")
        if self.movement == "none" and (self.slide_speed or self.pulse_amplitude):
            raise ValueError("movement 'none' requires slide_speed == 0 and "
                             "pulse_amplitude == 0")
        if self.movement == "sliding" and self.pulse_amplitude:
            raise ValueError("movement 'sliding' requires pulse_amplitude == 0")
        if self.movement == "pulse" and self.slide_speed:
            raise ValueError("movement 'pulse' requires slide_speed == 0")
        if not (0.2 * self.H <= self.band_row <= 0.8 * self.H):
            raise ValueError(f"band_row {self.band_row} outside "
                             f"[0.2H, 0.8H] = [{0.2 * self.H}, {0.8 * self.H}]")
        if self.band_sigma <= 0 or self.noise_sigma < 0 \
                or not (0 <= self.speckle_density <= 1):
            raise ValueError("band_sigma > 0, noise_sigma >= 0 and "
                             "speckle_density in [0, 1] required")
        if self.movement == "pulse" and self.pulse_period < 2:
            raise ValueError("pulse_period must be >= 2 frames")


def generate_video(spec: PhantomSpec):
    """Render one phantom video.

    Returns (VideoTensor float32, band row center per frame). Deterministic
    per spec.seed: the speckle texture is drawn first, then per-frame noise.
    """
    rng = np.random.default_rng(spec.seed)
    rows = np.arange(spec.H, dtype=np.float64)[:, None]
    texture = (rng.random((spec.H, spec.W)) < spec.speckle_density
               ).astype(np.float64)
    if texture.any():
        texture = _gaussian_blur_2d(texture, SPECKLE_BLUR_SIGMA)
        texture *= SPECKLE_AMPLITUDE / texture.max()

    band_rows = np.full(spec.T, float(spec.band_row))
    if spec.movement == "pulse":
        t = np.arange(spec.T)
        band_rows = spec.band_row + spec.pulse_amplitude * np.sin(
            2.0 * np.pi * t / spec.pulse_period)

    frames = np.empty((spec.T, spec.H, spec.W), dtype=np.float32)
    for t in range(spec.T):
        br = band_rows[t]
        frame = BACKGROUND + (BAND_PEAK - BACKGROUND) * np.exp(
            -0.5 * ((rows - br) / spec.band_sigma) ** 2)
        frame = np.broadcast_to(frame, (spec.H, spec.W)).copy()
        shift = int(round(spec.slide_speed * t)) if spec.movement == "sliding" else 0
        speckle = np.roll(texture, shift, axis=1) if shift else texture
        below = rows[:, 0] >= br + 3.0 * spec.band_sigma
        frame[below] += speckle[below]
        frame += rng.standard_normal((spec.H, spec.W)) * spec.noise_sigma
        frames[t] = frame.astype(np.float32)

    video = VideoTensor(frames=frames, frame_rate=20.0,
                        source_id=f"phantom_seed{spec.seed}")
    return video, band_rows


def _draw_spec(rng, base: PhantomSpec, movement: str) -> PhantomSpec:
    seed = int(rng.integers(0, 2**63 - 1))
    band_row = int(round(rng.uniform(0.3 * base.H, 0.7 * base.H)))
    band_sigma = float(rng.uniform(0.8 * base.band_sigma, 1.2 * base.band_sigma))
    slide = pulse = 0.0
    period = base.pulse_period
    if movement == "sliding":
        slide = float(rng.uniform(1.5, 3.0))
    elif movement == "pulse":
        pulse = float(rng.uniform(2.0, 4.0))
        period = float(rng.uniform(8.0, 16.0))
    return PhantomSpec(
        T=base.T, H=base.H, W=base.W, band_row=band_row, band_sigma=band_sigma,
        movement=movement, slide_speed=slide, pulse_amplitude=pulse,
        pulse_period=period, speckle_density=base.speckle_density,
        noise_sigma=base.noise_sigma, seed=seed)


def generate_dataset(n_pos: int, n_neg: int, out_dir, seed: int = 0,
                     base: Optional[PhantomSpec] = None, split: str = "train",
                     emit_boxes: bool = False, box_height: int = 40,
                     write_manifest_file: bool = True):
    """Write n_pos no-movement and n_neg movement phantom videos plus a manifest.

    Movement videos alternate between sliding and pulse. Every video gets a
    unique group_id. Returns the DatasetManifest (paths relative to out_dir).
    """
    from . import io_formats

    if n_pos < 1 or n_neg < 1:
        raise ValueError(f"need n_pos >= 1 and n_neg >= 1, got {n_pos}, {n_neg}")
    base = base or PhantomSpec()
    out_dir = str(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng(seed)

    plan = [("none", 0)] * n_pos
    plan += [("sliding" if i % 2 == 0 else "pulse", 1) for i in range(n_neg)]

    entries = []
    for idx, (movement, label) in enumerate(plan):
        spec = _draw_spec(rng, base, movement)
        video, band_rows = generate_video(spec)
        name = f"{split}_{idx:03d}.plca"
        io_formats.write_tensor(os.path.join(out_dir, name), video.frames)
        boxes = None
        if emit_boxes:
            h = min(box_height, base.H)
            boxes = {}
            for t, br in enumerate(band_rows):
                y = int(np.clip(int(round(br)) - h // 2, 0, base.H - h))
                boxes[t] = (0, y, base.W, h)
        entries.append(io_formats.ManifestEntry(
            path=name, label=label, group_id=f"{split}_g{idx:03d}",
            split=split, boxes=boxes))

    manifest = io_formats.DatasetManifest(entries=entries, base_dir=out_dir)
    if write_manifest_file:
        io_formats.write_manifest(
            os.path.join(out_dir, "manifest.txt"), manifest,
            header_comments=[
                f"phantom dataset: pos={n_pos} neg={n_neg} seed={seed} split={split}",
                f"base: T={base.T} H={base.H} W={base.W} "
                f"noise_sigma={base.noise_sigma} "
                f"speckle_density={base.speckle_density} "
                f"band_sigma={base.band_sigma}",
            ])
    return manifest
