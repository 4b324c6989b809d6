"""Encoder behavior: thresholding, energy bookkeeping, fixed points, and
agreement with the dense coordinate-descent LASSO oracle."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from plca.errors import DivergenceError, ShapeError
from plca.lca import (LcaConfig, energy, fixed_point_residual, lasso_oracle,
                      lca_encode, threshold)

from conftest import DESK, phantom_roi_clips


def dense_instance(rng, n_atoms=4, shape=(1, 2, 4), unit_norm=True):
    """A conv problem whose clip equals the filter extent, so the single
    placement per atom makes it exactly a dense LASSO problem."""
    d, p, q = shape
    phi = rng.standard_normal((n_atoms, d, p, q))
    if unit_norm:
        phi /= np.sqrt((phi ** 2).sum(axis=(1, 2, 3)))[:, None, None, None]
    x = rng.standard_normal(shape) * 0.7
    return x, phi


def dense_objective(x, phi_mat, a, lam):
    r = x.ravel() - phi_mat @ a
    return 0.5 * float(r @ r) + lam * float(np.abs(a).sum())


class TestThreshold:
    def test_below_threshold_zeroed(self):
        assert threshold(np.array([0.04]), 0.05, "soft")[0] == 0.0

    def test_soft_and_hard_values(self):
        mu = np.array([0.15])
        np.testing.assert_allclose(threshold(mu, 0.05, "soft"), [0.10], atol=1e-15)
        np.testing.assert_allclose(threshold(mu, 0.05, "hard"), [0.15], atol=0)

    def test_sign_symmetry(self):
        np.testing.assert_allclose(threshold(np.array([-0.15]), 0.05, "soft"),
                                   [-0.10], atol=1e-15)

    def test_hard_is_strict(self):
        assert threshold(np.array([0.05]), 0.05, "hard")[0] == 0.0

    def test_invalid_lambda(self):
        with pytest.raises(ValueError):
            threshold(np.zeros(3), 0.0)

    @given(st.lists(st.floats(-10, 10), min_size=1, max_size=40),
           st.floats(1e-3, 2.0))
    @settings(max_examples=100, deadline=None)
    def test_soft_shrinkage_bound(self, values, lam):
        mu = np.asarray(values)
        out = threshold(mu, lam, "soft")
        assert np.max(np.abs(out)) <= max(0.0, np.max(np.abs(mu)) - lam)

    @given(st.lists(st.floats(-10, 10), min_size=1, max_size=40),
           st.floats(1e-3, 2.0))
    @settings(max_examples=50, deadline=None)
    def test_soft_nonzeros_exceed_lambda(self, values, lam):
        mu = np.asarray(values)
        out = threshold(mu, lam, "soft")
        nz = out != 0
        assert np.all(np.abs(mu[nz]) > lam)


class TestEnergy:
    def test_both_terms_vanish(self):
        phi = np.ones((1, 1, 1, 1))
        assert energy(np.zeros((1, 1, 2)), np.zeros((1, 1, 1, 2)), phi, 0.05) == 0.0

    def test_zero_code_gives_half_norm(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((2, 4, 4))
        phi = rng.standard_normal((3, 1, 2, 2))
        a = np.zeros((3, 2, 3, 3))
        np.testing.assert_allclose(energy(x, a, phi, 0.05),
                                   0.5 * np.sum(x ** 2), rtol=1e-12)

    def test_tiny_hand_instance(self):
        x = np.array([[[1.0, 0.0]]])
        phi = np.ones((1, 1, 1, 1))
        a = np.zeros((1, 1, 1, 2))
        a[0, 0, 0, 0] = 0.5
        assert energy(x, a, phi, 0.05) == pytest.approx(0.15, abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            energy(np.zeros((2, 2, 2)), np.zeros((1, 1, 1, 1)),
                   np.zeros((1, 1, 1, 1)), 0.05)


class TestLcaEncode:
    def test_zero_input_zero_code(self):
        phi = np.random.default_rng(0).standard_normal((2, 1, 3, 3))
        cfg = LcaConfig(inner_steps=20, optimizer="plain", membrane_lr=0.1)
        amap = lca_encode(np.zeros((1, 6, 6)), phi, cfg)
        assert not amap.a.any()
        assert not amap.mu.any()

    def test_single_atom_recovers_c_minus_lambda(self):
        phi = np.zeros((1, 1, 2, 2))
        phi[0, 0, 0, 0] = 1.0  # spike atom: shifted copies are orthogonal
        c = 0.8
        x = np.zeros((1, 4, 4))
        x[0, 1, 1] = c
        cfg = LcaConfig(lam=0.05, inner_steps=1500, membrane_lr=0.1,
                        optimizer="plain")
        amap = lca_encode(x, phi, cfg)
        peak = np.unravel_index(np.argmax(amap.a), amap.a.shape)
        assert peak == (0, 0, 1, 1)
        assert amap.a[peak] == pytest.approx(c - 0.05, abs=1e-8)
        off_peak = amap.a.copy()
        off_peak[peak] = 0.0
        assert np.max(np.abs(off_peak)) < 1e-8

    def test_matches_lasso_oracle_on_dense_instances(self):
        rng = np.random.default_rng(123)
        cfg = LcaConfig(lam=0.05, inner_steps=2000, membrane_lr=0.1,
                        optimizer="plain")
        for _ in range(3):
            x, phi = dense_instance(rng)
            amap = lca_encode(x, phi, cfg)
            a_cd = lasso_oracle(x.ravel(), phi.reshape(4, -1).T, 0.05)
            np.testing.assert_allclose(amap.a.ravel(), a_cd, atol=1e-4)
            e_lca = energy(x, amap.a, phi, 0.05)
            e_cd = dense_objective(x, phi.reshape(4, -1).T, a_cd, 0.05)
            assert abs(e_lca - e_cd) < 1e-8

    def test_adam_mode_runs_and_sparsifies(self, phantom_clip_bank):
        clip = phantom_clip_bank[0].astype(np.float64)
        rng = np.random.default_rng(1)
        phi = rng.standard_normal((8, 5, 15, 15))
        phi /= np.sqrt((phi ** 2).sum(axis=(1, 2, 3)))[:, None, None, None]
        cfg = LcaConfig(lam=0.05, inner_steps=30, membrane_lr=0.01,
                        optimizer="adam", strides=(1, 2, 2))
        amap = lca_encode(clip, phi, cfg)
        assert np.all(np.isfinite(amap.a))
        assert 0.0 < amap.sparsity < 1.0

    def test_final_code_is_threshold_of_final_mu(self, phantom_clip_bank):
        clip = phantom_clip_bank[1].astype(np.float64)
        rng = np.random.default_rng(2)
        phi = rng.standard_normal((4, 5, 15, 15))
        cfg = LcaConfig(lam=0.05, inner_steps=15, membrane_lr=0.01,
                        optimizer="adam", strides=(1, 2, 2))
        amap = lca_encode(clip, phi, cfg)
        np.testing.assert_array_equal(amap.a, threshold(amap.mu, cfg.lam, "soft"))

    def test_deterministic_bit_identical(self, phantom_clip_bank):
        clip = phantom_clip_bank[2].astype(np.float64)
        phi = np.random.default_rng(3).standard_normal((4, 5, 15, 15))
        cfg = LcaConfig(lam=0.05, inner_steps=12, membrane_lr=0.01,
                        optimizer="adam", strides=(1, 2, 2))
        a1 = lca_encode(clip, phi, cfg)
        a2 = lca_encode(clip, phi, cfg)
        assert np.array_equal(a1.a, a2.a)
        assert np.array_equal(a1.mu, a2.mu)

    def test_energy_descent_plain_mode(self, phantom_clip_bank):
        cfg = LcaConfig(lam=0.05, inner_steps=80, membrane_lr=0.01,
                        optimizer="plain", strides=(1, 2, 2))
        rng = np.random.default_rng(4)
        phi = rng.standard_normal((8, 5, 15, 15))
        phi /= np.sqrt((phi ** 2).sum(axis=(1, 2, 3)))[:, None, None, None]
        for clip in phantom_clip_bank[:3]:
            amap = lca_encode(clip.astype(np.float64), phi, cfg,
                              record_energy=True)
            e = amap.energies
            assert np.all(np.diff(e[10:]) <= 1e-6)

    def test_divergence_error_names_step(self):
        phi = np.ones((1, 1, 2, 2))
        x = np.full((1, 6, 6), 50.0)
        cfg = LcaConfig(lam=0.05, inner_steps=200, membrane_lr=1e5,
                        optimizer="plain")
        with pytest.raises(DivergenceError) as err:
            lca_encode(x, phi, cfg)
        assert err.value.where is not None
        assert "step" in str(err.value)

    def test_bad_clip_rank(self):
        with pytest.raises(ShapeError):
            lca_encode(np.zeros((4, 4)), np.zeros((1, 1, 2, 2)), LcaConfig())


class TestLcaConfig:
    @pytest.mark.parametrize("kwargs", [
        dict(lam=0.0), dict(inner_steps=0), dict(membrane_lr=-1e-3),
        dict(optimizer="sgd"), dict(threshold_mode="relu"),
        dict(strides=(0, 1, 1)),
    ])
    def test_validation(self, kwargs):
        with pytest.raises(ValueError):
            LcaConfig(**kwargs)


class TestLassoOracle:
    def test_null_solution_condition(self):
        rng = np.random.default_rng(0)
        phi = rng.standard_normal((8, 4))
        x = rng.standard_normal(8)
        lam = float(np.max(np.abs(phi.T @ x))) + 1e-9
        assert not lasso_oracle(x, phi, lam).any()

    def test_orthonormal_closed_form(self):
        rng = np.random.default_rng(1)
        q, _ = np.linalg.qr(rng.standard_normal((8, 4)))
        x = rng.standard_normal(8)
        lam = 0.1
        a = lasso_oracle(x, q, lam)
        proj = q.T @ x
        expected = np.sign(proj) * np.maximum(np.abs(proj) - lam, 0.0)
        np.testing.assert_allclose(a, expected, atol=1e-12)

    def test_perturbation_optimality(self):
        rng = np.random.default_rng(2)
        phi = rng.standard_normal((8, 4))
        x = rng.standard_normal(8)
        lam = 0.05
        a = lasso_oracle(x, phi, lam)
        base = dense_objective(x, phi, a, lam)
        for _ in range(1000):
            perturbed = a + rng.standard_normal(4) * rng.choice([1e-4, 1e-2, 1e-1])
            assert dense_objective(x, phi, perturbed, lam) >= base - 1e-12

    def test_size_guard(self):
        with pytest.raises(ValueError):
            lasso_oracle(np.zeros(65), np.zeros((65, 2)), 0.1)

    def test_shape_guard(self):
        with pytest.raises(ShapeError):
            lasso_oracle(np.zeros(8), np.zeros((7, 2)), 0.1)


class TestFixedPointResidual:
    def test_zero_everywhere(self):
        phi = np.ones((1, 1, 2, 2))
        cfg = LcaConfig()
        assert fixed_point_residual(np.zeros((1, 4, 4)), phi,
                                    np.zeros((1, 1, 3, 3)), cfg) == 0.0

    def test_plain_encoding_shrinks_residual(self, phantom_clip_bank):
        clip = phantom_clip_bank[0].astype(np.float64)
        rng = np.random.default_rng(5)
        phi = rng.standard_normal((6, 5, 15, 15))
        phi /= np.sqrt((phi ** 2).sum(axis=(1, 2, 3)))[:, None, None, None]
        cfg = LcaConfig(lam=0.05, inner_steps=300, membrane_lr=0.01,
                        optimizer="plain", strides=(1, 2, 2))
        mu0 = np.zeros((6, 1,
                        (DESK["crop_h"] - 15) // 2 + 1,
                        (DESK["crop_w"] - 15) // 2 + 1))
        initial = fixed_point_residual(clip, phi, mu0, cfg)
        amap = lca_encode(clip, phi, cfg)
        final = fixed_point_residual(clip, phi, amap.mu, cfg)
        assert final < 0.1 * initial

    def test_oracle_solution_is_fixed_point(self):
        rng = np.random.default_rng(6)
        x, phi = dense_instance(rng)
        phi_mat = phi.reshape(4, -1).T
        a = lasso_oracle(x.ravel(), phi_mat, 0.05)
        mu_star = (a + phi_mat.T @ (x.ravel() - phi_mat @ a)).reshape(4, 1, 1, 1)
        cfg = LcaConfig(lam=0.05, optimizer="plain")
        assert fixed_point_residual(x, phi, mu_star, cfg) < 1e-6
