"""Shared fixtures: desk-scale phantom data and session-cached training runs.

The desk profile keeps the paper-pinned hyperparameters (lambda 0.05,
filter lr 3e-3, 48 filters of 5x15x15, batch size 32) but shrinks frame
size, crop size, and inner-loop steps so the whole suite runs on a laptop
CPU. Heavy artifacts (trained dictionaries, end-to-end runs) are session
fixtures so acceptance criteria can share them.
"""

from __future__ import annotations

import numpy as np
import pytest

from plca.dictionary import DictLearnConfig, init_dictionary, learn
from plca.lca import LcaConfig
from plca.phantom import PhantomSpec, generate_video
from plca.pipeline import (PipelineConfig, crop_clip, detect_roi, extract_clips,
                           normalize)

# Desk-scale experiment profile (see tests/test_acceptance.py for use).
DESK = {
    "phantom": dict(T=40, H=96, W=128, band_sigma=2.5, speckle_density=0.10,
                    noise_sigma=0.015),
    "crop_h": 48,
    "crop_w": 96,
    "lca_train": LcaConfig(lam=0.05, inner_steps=100, membrane_lr=0.03,
                           optimizer="adam", strides=(1, 2, 2)),
    "lca_eval": LcaConfig(lam=0.05, inner_steps=100, membrane_lr=0.03,
                          optimizer="adam", strides=(1, 2, 2)),
    "dict_epochs_e2e": 6,
    "dict_clips_per_video": 1,
    "clf_clips_per_video": 2,
    "augment_copies": 2,
    "num_eval_clips": 4,
}


def desk_pipeline_config(threads: int = 1) -> PipelineConfig:
    return PipelineConfig(
        num_clips=DESK["num_eval_clips"], crop_h=DESK["crop_h"],
        crop_w=DESK["crop_w"], lca=DESK["lca_eval"], threads=threads)


def make_phantom_spec(rng, movement: str, seed: int) -> PhantomSpec:
    base = DESK["phantom"]
    return PhantomSpec(
        **base,
        movement=movement,
        slide_speed=float(rng.uniform(1.5, 3.0)) if movement == "sliding" else 0.0,
        pulse_amplitude=float(rng.uniform(2.0, 4.0)) if movement == "pulse" else 0.0,
        pulse_period=float(rng.uniform(8.0, 16.0)),
        band_row=int(rng.uniform(0.35 * base["H"], 0.65 * base["H"])),
        seed=seed,
    )


def phantom_roi_clips(n_clips: int, seed: int = 0, clips_per_video: int = 2,
                      movements=("none", "sliding", "pulse"),
                      dtype=np.float32):
    """Normalized, ROI-cropped desk-scale clips cycling through movements."""
    rng = np.random.default_rng(seed)
    clips = []
    i = 0
    while len(clips) < n_clips:
        spec = make_phantom_spec(rng, movements[i % len(movements)],
                                 seed=seed * 10000 + i)
        video, _ = generate_video(spec)
        v = normalize(video)
        for center, clip in extract_clips(v.frames, clips_per_video):
            box = detect_roi(v.frames[center])
            clips.append(crop_clip(clip, box, DESK["crop_h"],
                                   DESK["crop_w"]).astype(dtype))
        i += 1
    return clips[:n_clips]


@pytest.fixture(scope="session")
def phantom_clip_bank():
    """Small bank of desk-scale cropped clips for encoder-level tests."""
    return phantom_roi_clips(6, seed=3)


@pytest.fixture(scope="session")
def dict_training_run():
    """Criterion-4 style run: 64 clips, 20 epochs, paper hyperparameters
    (lambda, filter lr, filter bank shape, batch size) at desk clip size."""
    import time
    clips = phantom_roi_clips(64, seed=11)
    cfg = DictLearnConfig(filter_lr=3e-3, epochs=20, batch_size=32,
                          lca=DESK["lca_train"], seed=0)
    init = init_dictionary(48, 5, 15, 15, seed=0, dtype=np.float32)
    t0 = time.perf_counter()
    learned, metrics = learn(clips, init, cfg, threads=2)
    elapsed = time.perf_counter() - t0
    return {"dictionary": learned, "metrics": metrics, "clips": clips,
            "init": init, "config": cfg, "seconds": elapsed}
