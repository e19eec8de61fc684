"""Generative model: bases, sampling, noising, controlled violations."""

import numpy as np
import pytest

from molrg_lab import molrg
from molrg_lab.errors import (
    DimensionOverflow,
    LengthMismatch,
    NonPositiveDelta,
    NonPositiveSigma,
    OverlapUnsupported,
)


def principal_angles_deg(a, b):
    sv = np.linalg.svd(a.T @ b, compute_uv=False)
    return np.degrees(np.arccos(np.clip(sv, -1, 1)))


class TestConfig:
    def test_mixing_defaults_uniform(self):
        cfg = molrg.MolrgConfig(n=10, dims=(2, 3), delta=0.5)
        assert cfg.mixing == (0.5, 0.5)

    def test_mixing_must_sum_to_one(self):
        with pytest.raises(LengthMismatch):
            molrg.MolrgConfig(n=10, dims=(2, 2), delta=0.5, mixing=(0.6, 0.5))

    def test_delta_positive(self):
        with pytest.raises(NonPositiveDelta):
            molrg.MolrgConfig(n=10, dims=(2, 2), delta=0.0)

    def test_dims_must_fit(self):
        with pytest.raises(DimensionOverflow):
            molrg.MolrgConfig(n=5, dims=(3, 3), delta=0.5)

    def test_overlap_needs_two_classes(self):
        with pytest.raises(OverlapUnsupported):
            molrg.MolrgConfig(n=30, dims=(3, 3, 3), delta=0.5, overlap_angle=30.0)


class TestGenBases:
    def test_identity_aligned_canonical_axes(self):
        cfg = molrg.MolrgConfig(n=2, dims=(1, 1), delta=0.5)
        bases = molrg.gen_bases(cfg, seed=None)
        eye = np.eye(2)
        np.testing.assert_allclose(bases.u[0][:, 0], eye[:, 0])
        np.testing.assert_allclose(bases.u[1][:, 0], eye[:, 1])
        np.testing.assert_allclose(bases.u_tilde[0][:, 0], eye[:, 1])
        np.testing.assert_allclose(bases.u_tilde[1][:, 0], eye[:, 0])

    def test_orthonormality_invariants(self):
        cfg = molrg.MolrgConfig(n=50, dims=(5, 5, 5), delta=0.2)
        bases = molrg.gen_bases(cfg, seed=11)
        for k in range(3):
            uk = bases.u[k]
            np.testing.assert_allclose(uk.T @ uk, np.eye(5), atol=1e-10)
            for l in range(3):
                if l != k:
                    assert np.abs(bases.u[k].T @ bases.u[l]).max() < 1e-10
            # u_tilde spans exactly the union of the other blocks
            proj_tilde = bases.u_tilde[k] @ bases.u_tilde[k].T
            proj_sum = sum(bases.u[l] @ bases.u[l].T for l in range(3) if l != k)
            assert np.linalg.norm(proj_tilde - proj_sum) < 1e-8
            assert np.abs(bases.u_perp.T @ uk).max() < 1e-12
        assert bases.u_perp.shape == (50, 35)

    def test_fig3_shape(self):
        cfg = molrg.MolrgConfig(n=50, dims=(5, 5, 5), delta=0.2)
        bases = molrg.gen_bases(cfg, seed=0)
        assert bases.stacked().shape == (50, 15)

    def test_overlap_angle_30(self):
        cfg = molrg.MolrgConfig(n=50, dims=(5, 5), delta=0.2, overlap_angle=30.0)
        bases = molrg.gen_bases(cfg, seed=3)
        angles = principal_angles_deg(bases.u[0], bases.u[1])
        np.testing.assert_allclose(angles, 30.0, atol=0.01)
        assert angles.min() == pytest.approx(30.0, abs=0.01)
        for k in (0, 1):
            np.testing.assert_allclose(bases.u[k].T @ bases.u[k], np.eye(5), atol=1e-10)
        assert not bases.orthogonal

    def test_deterministic_per_seed(self):
        cfg = molrg.MolrgConfig(n=20, dims=(2, 3), delta=0.4)
        a = molrg.gen_bases(cfg, seed=7)
        b = molrg.gen_bases(cfg, seed=7)
        np.testing.assert_array_equal(a.stacked(), b.stacked())
        c = molrg.gen_bases(cfg, seed=8)
        assert np.abs(a.stacked() - c.stacked()).max() > 1e-3


class TestSampleDataset:
    def test_sample_lies_in_union_span(self):
        cfg = molrg.MolrgConfig(n=30, dims=(4, 4), delta=0.3)
        bases = molrg.gen_bases(cfg, seed=1)
        for s in molrg.sample_dataset(cfg, bases, 50, seed=2):
            assert np.linalg.norm(bases.u_perp.T @ s.x0) < 1e-10

    def test_delta_limit_pure_subspace(self):
        cfg = molrg.MolrgConfig(n=20, dims=(3, 3), delta=1e-12)
        bases = molrg.gen_bases(cfg, seed=1)
        for s in molrg.sample_dataset(cfg, bases, 20, seed=2):
            recon = bases.u[s.label] @ (bases.u[s.label].T @ s.x0)
            np.testing.assert_allclose(recon, s.x0, atol=1e-10)

    def test_latents_reproduce_sample(self):
        cfg = molrg.MolrgConfig(n=30, dims=(4, 4), delta=0.3)
        bases = molrg.gen_bases(cfg, seed=1)
        for s in molrg.sample_dataset(cfg, bases, 20, seed=9):
            a, e = s.latents
            x = bases.u[s.label] @ a + cfg.delta * (bases.u_tilde[s.label] @ e)
            np.testing.assert_allclose(x, s.x0, atol=1e-12)

    def test_class_frequencies(self):
        cfg = molrg.MolrgConfig(n=12, dims=(2, 2, 2), delta=0.3, mixing=(0.5, 0.3, 0.2))
        bases = molrg.gen_bases(cfg, seed=1)
        n = 100_000
        _, labels = molrg.stack_samples(molrg.sample_dataset(cfg, bases, n, seed=3))
        for k, pi in enumerate(cfg.mixing):
            freq = np.mean(labels == k)
            se = np.sqrt(pi * (1 - pi) / n)
            assert abs(freq - pi) < 3 * se

    def test_projected_energy_moments(self):
        """|U_k^T x0|^2 averages to d_k and |Utilde_k^T x0|^2 to delta^2 D_k."""
        cfg = molrg.MolrgConfig(n=16, dims=(3, 3), delta=0.4)
        bases = molrg.gen_bases(cfg, seed=4)
        n = 100_000
        samples = molrg.sample_dataset(cfg, bases, n, seed=5)
        x, labels = molrg.stack_samples(samples)
        for k in range(2):
            xk = x[labels == k]
            m = xk.shape[0]
            eu = np.sum((xk @ bases.u[k]) ** 2, axis=1)
            et = np.sum((xk @ bases.u_tilde[k]) ** 2, axis=1)
            d, dd = 3, 3
            assert abs(eu.mean() - d) < 3 * np.sqrt(2 * d / m)
            assert abs(et.mean() - cfg.delta**2 * dd) < 3 * cfg.delta**2 * np.sqrt(2 * dd / m)

    def test_empirical_covariance_matches_analytic(self):
        cfg = molrg.MolrgConfig(n=16, dims=(3, 3), delta=0.4)
        bases = molrg.gen_bases(cfg, seed=4)
        n = 100_000
        x, labels = molrg.stack_samples(molrg.sample_dataset(cfg, bases, n, seed=6))
        for k in range(2):
            xk = x[labels == k]
            emp = xk.T @ xk / xk.shape[0]
            ana = bases.u[k] @ bases.u[k].T + cfg.delta**2 * (
                bases.u_tilde[k] @ bases.u_tilde[k].T
            )
            assert np.linalg.norm(emp - ana) < 3 * cfg.n / np.sqrt(xk.shape[0])

    def test_deterministic(self):
        cfg = molrg.MolrgConfig(n=10, dims=(2, 2), delta=0.3)
        bases = molrg.gen_bases(cfg, seed=1)
        a = molrg.sample_dataset(cfg, bases, 10, seed=42)
        b = molrg.sample_dataset(cfg, bases, 10, seed=42)
        for sa, sb in zip(a, b):
            np.testing.assert_array_equal(sa.x0, sb.x0)
            assert sa.label == sb.label

    def test_count_validation(self):
        cfg = molrg.MolrgConfig(n=10, dims=(2, 2), delta=0.3)
        bases = molrg.gen_bases(cfg, seed=1)
        with pytest.raises(LengthMismatch):
            molrg.sample_dataset(cfg, bases, 0, seed=1)


class TestAddNoise:
    def test_scale(self):
        x0 = np.zeros(400)
        xt = molrg.add_noise(x0, 1e-4, seed=0)
        # |x_t - x0| concentrates around sigma * sqrt nat
        assert np.linalg.norm(xt - x0) == pytest.approx(1e-4 * np.sqrt(400), rel=0.2)

    def test_energy_shift(self):
        """E|x_t|^2 - E|x0|^2 = sigma^2 n over many draws."""
        cfg = molrg.MolrgConfig(n=10, dims=(2, 2), delta=0.3)
        bases = molrg.gen_bases(cfg, seed=1)
        x, _ = molrg.stack_samples(molrg.sample_dataset(cfg, bases, 100_000, seed=2))
        sigma = 0.7
        xt = molrg.add_noise(x, sigma, seed=3)
        shift = np.mean(np.sum(xt**2, axis=1)) - np.mean(np.sum(x**2, axis=1))
        # var of the shift estimate: dominated by the cross and chi2 terms
        se = np.sqrt((2 * sigma**4 * cfg.n + 4 * sigma**2 * 4.0) / x.shape[0])
        assert abs(shift - sigma**2 * cfg.n) < 3 * se

    def test_seeded_bitwise(self):
        x0 = np.arange(5.0)
        np.testing.assert_array_equal(
            molrg.add_noise(x0, 0.5, seed=9), molrg.add_noise(x0, 0.5, seed=9)
        )

    def test_sigma_validated(self):
        with pytest.raises(NonPositiveSigma):
            molrg.add_noise(np.zeros(3), 0.0, seed=0)


class TestWellSeparated:
    def test_zero_separation_is_identity(self):
        base = molrg.MolrgConfig(n=20, dims=(3, 3), delta=0.2)
        assert molrg.well_separated_config(base, 0.0) is base

    def test_mean_geometry(self):
        base = molrg.MolrgConfig(n=20, dims=(3, 3), delta=0.2)
        cfg = molrg.well_separated_config(base, 4.0)
        dist = np.linalg.norm(cfg.means[0] - cfg.means[1])
        assert dist == pytest.approx(4.0 * np.sqrt(2), rel=1e-12)
        # means are mutually orthogonal with norm = separation
        assert abs(cfg.means[0] @ cfg.means[1]) < 1e-12
        assert np.linalg.norm(cfg.means[0]) == pytest.approx(4.0)

    def test_means_orthogonal_to_subspaces(self):
        base = molrg.MolrgConfig(n=20, dims=(3, 3), delta=0.2)
        cfg = molrg.well_separated_config(base, 4.0)
        bases = molrg.gen_bases(cfg, seed=5)
        for mu in cfg.means:
            assert np.abs(bases.stacked().T @ mu).max() < 1e-10

    def test_samples_centered_at_means(self):
        base = molrg.MolrgConfig(n=20, dims=(3, 3), delta=0.2)
        cfg = molrg.well_separated_config(base, 6.0)
        bases = molrg.gen_bases(cfg, seed=5)
        x, labels = molrg.stack_samples(molrg.sample_dataset(cfg, bases, 20_000, seed=6))
        for k in range(2):
            center = x[labels == k].mean(axis=0)
            np.testing.assert_allclose(center, cfg.means[k], atol=0.1)


class TestDatasetIo:
    def test_roundtrip(self, tmp_path):
        cfg = molrg.MolrgConfig(n=8, dims=(2, 2), delta=0.3, mixing=(0.7, 0.3))
        bases = molrg.gen_bases(cfg, seed=1)
        samples = molrg.sample_dataset(cfg, bases, 25, seed=2)
        path = tmp_path / "data.csv"
        molrg.save_dataset(path, samples, cfg, seed=2, bases=bases)
        loaded, cfg2, sidecar = molrg.load_dataset(path)
        assert cfg2 == cfg
        assert sidecar["seed"] == 2
        assert len(loaded) == 25
        for a, b in zip(samples, loaded):
            np.testing.assert_array_equal(a.x0, b.x0)
            assert a.label == b.label

    def test_header_layout(self, tmp_path):
        cfg = molrg.MolrgConfig(n=3, dims=(1, 1), delta=0.3)
        bases = molrg.gen_bases(cfg, seed=1)
        path = tmp_path / "data.csv"
        molrg.save_dataset(path, molrg.sample_dataset(cfg, bases, 2, seed=0), cfg, seed=0)
        header = path.read_text().splitlines()[0]
        assert header == "label,x_0,x_1,x_2"
