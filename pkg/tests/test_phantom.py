"""Phantom generator: determinism, movement statistics, spec validation, and
the link between generated band positions and the ROI detector."""

import hashlib
import os

import numpy as np
import pytest

from plca.phantom import PhantomSpec, generate_dataset, generate_video
from plca.pipeline import detect_roi, normalize


def spec_for(movement, **kwargs):
    defaults = dict(T=24, H=96, W=128, band_row=48, band_sigma=2.5, seed=5,
                    slide_speed=2.0 if movement == "sliding" else 0.0,
                    pulse_amplitude=3.0 if movement == "pulse" else 0.0,
                    pulse_period=10.0)
    defaults.update(kwargs)
    return PhantomSpec(movement=movement, **defaults)


class TestSpecValidation:
    def test_none_requires_zero_speeds(self):
        with pytest.raises(ValueError):
            PhantomSpec(movement="none", slide_speed=1.0, pulse_amplitude=0.0)
        with pytest.raises(ValueError):
            PhantomSpec(movement="none", slide_speed=0.0, pulse_amplitude=2.0)

    def test_single_motion_per_mode(self):
        with pytest.raises(ValueError):
            PhantomSpec(movement="sliding", slide_speed=2.0, pulse_amplitude=1.0)
        with pytest.raises(ValueError):
            PhantomSpec(movement="pulse", slide_speed=1.0, pulse_amplitude=2.0)

    def test_band_row_range(self):
        with pytest.raises(ValueError):
            PhantomSpec(H=100, band_row=10, movement="none", slide_speed=0,
                        pulse_amplitude=0)

    def test_default_band_row_is_mid_frame(self):
        spec = PhantomSpec(movement="none", slide_speed=0, pulse_amplitude=0)
        assert spec.band_row == int(round(0.45 * spec.H))


class TestGenerateVideo:
    def test_deterministic_per_seed(self):
        a, rows_a = generate_video(spec_for("sliding"))
        b, rows_b = generate_video(spec_for("sliding"))
        np.testing.assert_array_equal(a.frames, b.frames)
        np.testing.assert_array_equal(rows_a, rows_b)

    def test_video_tensor_invariants(self):
        video, band_rows = generate_video(spec_for("pulse"))
        assert video.frames.shape == (24, 96, 128)
        assert video.frames.shape[0] >= 5
        assert np.all(np.isfinite(video.frames))
        assert len(band_rows) == 24

    def test_static_video_diff_is_noise_limited(self):
        spec = spec_for("none", noise_sigma=0.015)
        video, _ = generate_video(spec)
        diffs = np.abs(np.diff(video.frames.astype(np.float64), axis=0))
        bound = 2 * spec.noise_sigma * np.sqrt(2 / np.pi) * 1.1
        assert diffs.mean() <= bound

    def test_sliding_shifts_speckle_rows(self):
        spec = spec_for("sliding", slide_speed=2.0, T=12)
        video, band_rows = generate_video(spec)
        row = int(band_rows[0] + 3 * spec.band_sigma + 6)
        peaks = []
        for t in range(4, 10):
            a = video.frames[t, row].astype(np.float64)
            b = video.frames[t + 1, row].astype(np.float64)
            a -= a.mean()
            b -= b.mean()
            lags = range(-5, 6)
            scores = [np.dot(np.roll(b, -lag), a) for lag in lags]
            peaks.append(list(lags)[int(np.argmax(scores))])
        assert abs(np.median(peaks) - 2.0) <= 1.0

    def test_pulse_moves_band(self):
        video, band_rows = generate_video(spec_for("pulse"))
        assert band_rows.max() - band_rows.min() >= 4.0

    def test_roi_detector_recovers_band(self):
        for movement in ("none", "sliding", "pulse"):
            for seed in (1, 2, 3):
                spec = spec_for(movement, seed=seed, noise_sigma=0.01)
                video, band_rows = generate_video(spec)
                frames = normalize(video).frames
                for t in (0, 10):
                    box = detect_roi(frames[t])
                    center = box.y + box.h // 2
                    assert abs(center - band_rows[t]) <= 5


def tree_digest(root):
    digest = hashlib.sha256()
    for name in sorted(os.listdir(root)):
        digest.update(name.encode())
        with open(os.path.join(root, name), "rb") as fh:
            digest.update(fh.read())
    return digest.hexdigest()


class TestGenerateDataset:
    def small_base(self):
        return PhantomSpec(T=12, H=64, W=64, band_row=30, movement="none",
                           slide_speed=0, pulse_amplitude=0)

    def test_counts_and_labels(self, tmp_path):
        manifest = generate_dataset(3, 4, tmp_path / "d", seed=0,
                                    base=self.small_base())
        assert len(manifest.entries) == 7
        assert manifest.count(0) == 3
        assert manifest.count(1) == 4
        # label 0 <=> no movement, by construction of the plan
        for entry in manifest.entries[:3]:
            assert entry.label == 0

    def test_unique_group_ids(self, tmp_path):
        manifest = generate_dataset(2, 3, tmp_path / "d", seed=1,
                                    base=self.small_base())
        groups = [e.group_id for e in manifest.entries]
        assert len(set(groups)) == len(groups)

    def test_same_seed_identical_tree(self, tmp_path):
        generate_dataset(2, 2, tmp_path / "a", seed=7, base=self.small_base())
        generate_dataset(2, 2, tmp_path / "b", seed=7, base=self.small_base())
        assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")

    def test_videos_written_and_loadable(self, tmp_path):
        from plca.io_formats import read_manifest, read_tensor
        generate_dataset(1, 1, tmp_path / "d", seed=2, base=self.small_base())
        manifest = read_manifest(tmp_path / "d" / "manifest.txt")
        assert len(manifest.entries) == 2
        frames = read_tensor(os.path.join(manifest.base_dir,
                                          manifest.entries[0].path))
        assert frames.shape == (12, 64, 64)

    def test_emit_boxes(self, tmp_path):
        manifest = generate_dataset(1, 1, tmp_path / "d", seed=3,
                                    base=self.small_base(), emit_boxes=True)
        for entry in manifest.entries:
            assert entry.boxes is not None
            assert len(entry.boxes) == 12
            for _, (x, y, w, h) in entry.boxes.items():
                assert w == 64 and h == 40
                assert 0 <= y <= 64 - 40

    def test_invalid_counts(self, tmp_path):
        with pytest.raises(ValueError):
            generate_dataset(0, 2, tmp_path / "d", seed=0)
