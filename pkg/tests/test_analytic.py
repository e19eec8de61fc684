"""Closed-form density, score, posterior, and expected-weight checks.

The independent oracles here are: dense-covariance Gaussian mixture log-pdfs,
central finite differences of the implemented log-density, a self-normalized
Monte Carlo estimate of the conditional mean, and Monte Carlo means of the
gating logits.
"""

import numpy as np
import pytest

from molrg_lab import analytic, molrg
from molrg_lab.errors import InvalidForUnequalDims, NonPositiveSigma


def small_mixture():
    cfg = molrg.MolrgConfig(n=6, dims=(1, 1), delta=0.3)
    return cfg, molrg.gen_bases(cfg, seed=5)


def dense_gmm_logpdf(x, sigma, cfg, bases):
    """Brute-force oracle: assemble full covariances and solve densely."""
    total = []
    for k in range(cfg.K):
        cov = (
            bases.u[k] @ bases.u[k].T
            + cfg.delta**2 * bases.u_tilde[k] @ bases.u_tilde[k].T
            + sigma**2 * np.eye(cfg.n)
        )
        diff = x - cfg.mean(k)
        _, logdet = np.linalg.slogdet(cov)
        quad = diff @ np.linalg.solve(cov, diff)
        total.append(
            np.log(cfg.mixing[k]) - 0.5 * (cfg.n * np.log(2 * np.pi) + logdet + quad)
        )
    peak = max(total)
    return peak + np.log(sum(np.exp(t - peak) for t in total))


class TestLogDensity:
    def test_single_class_isotropic_collapse(self):
        """K=1 with d=n is an isotropic Gaussian with variance 1+sigma^2."""
        cfg = molrg.MolrgConfig(n=4, dims=(4,), delta=1.0)
        bases = molrg.gen_bases(cfg, seed=1)
        x = molrg.rng_from(2).standard_normal(4)
        for sigma in (0.05, 0.5, 2.0):
            got = analytic.log_density(x, sigma, cfg, bases)
            var = 1 + sigma**2
            want = -0.5 * (4 * np.log(2 * np.pi * var) + x @ x / var)
            np.testing.assert_allclose(got, want, rtol=1e-12)

    def test_against_dense_oracle(self):
        cfg, bases = small_mixture()
        rng = molrg.rng_from(3)
        for _ in range(20):
            x = rng.standard_normal(6)
            got = analytic.log_density(x, 0.5, cfg, bases)
            want = dense_gmm_logpdf(x, 0.5, cfg, bases)
            np.testing.assert_allclose(got, want, atol=1e-9)

    def test_against_dense_oracle_overlap(self):
        cfg = molrg.MolrgConfig(n=12, dims=(2, 2), delta=0.3, overlap_angle=40.0)
        bases = molrg.gen_bases(cfg, seed=4)
        rng = molrg.rng_from(5)
        for sigma in (0.1, 0.7):
            x = rng.standard_normal(12)
            np.testing.assert_allclose(
                analytic.log_density(x, sigma, cfg, bases),
                dense_gmm_logpdf(x, sigma, cfg, bases),
                atol=1e-9,
            )

    def test_symmetry_zero_mean(self):
        cfg, bases = small_mixture()
        x = molrg.rng_from(6).standard_normal(6)
        np.testing.assert_allclose(
            analytic.log_density(x, 0.4, cfg, bases),
            analytic.log_density(-x, 0.4, cfg, bases),
            rtol=1e-12,
        )

    def test_sigma_validated(self):
        cfg, bases = small_mixture()
        with pytest.raises(NonPositiveSigma):
            analytic.log_density(np.zeros(6), 0.0, cfg, bases)


class TestScore:
    def test_zero_at_origin(self):
        cfg, bases = small_mixture()
        np.testing.assert_allclose(
            analytic.score(np.zeros(6), 0.5, cfg, bases), 0.0, atol=1e-12
        )

    def test_finite_differences(self):
        cfg, bases = small_mixture()
        rng = molrg.rng_from(7)
        h = 1e-5
        for sigma in (0.1, 0.5, 1.5):
            for _ in range(8):
                x = rng.standard_normal(6)
                got = analytic.score(x, sigma, cfg, bases)
                fd = np.zeros(6)
                for i in range(6):
                    e = np.zeros(6)
                    e[i] = h
                    fd[i] = (
                        analytic.log_density(x + e, sigma, cfg, bases)
                        - analytic.log_density(x - e, sigma, cfg, bases)
                    ) / (2 * h)
                assert np.abs(got - fd).max() / np.abs(fd).max() < 1e-5

    def test_tweedie_identity(self):
        cfg, bases = small_mixture()
        rng = molrg.rng_from(8)
        for _ in range(30):
            x = rng.standard_normal(6)
            sigma = 10 ** rng.uniform(-2, 0.5)
            post = analytic.posterior_exact(x, sigma, cfg, bases)
            np.testing.assert_allclose(
                post, x + sigma**2 * analytic.score(x, sigma, cfg, bases), atol=1e-10
            )


class TestLogitsStar:
    def test_uniform_at_delta_one(self):
        cfg = molrg.MolrgConfig(n=12, dims=(2, 2, 2), delta=1.0)
        bases = molrg.gen_bases(cfg, seed=9)
        x = molrg.rng_from(10).standard_normal(12)
        lv = analytic.logits_star(x, 0.5, cfg, bases)
        np.testing.assert_allclose(lv.w, 1 / 3, atol=1e-12)
        assert lv.w.sum() == pytest.approx(1.0, abs=1e-12)

    def test_softmax_shift_invariance(self):
        g = np.array([3.0, 1.0, -2.0])
        np.testing.assert_allclose(
            analytic.softmax(g), analytic.softmax(g + 1e6), atol=1e-12
        )

    def test_extreme_logits_stay_finite(self):
        cfg = molrg.MolrgConfig(n=20, dims=(2, 2), delta=0.2)
        bases = molrg.gen_bases(cfg, seed=11)
        x = molrg.sample_dataset(cfg, bases, 1, seed=12)[0].x0
        lv = analytic.logits_star(x, 1e-3, cfg, bases)
        assert np.all(np.isfinite(lv.w))
        assert lv.w.sum() == pytest.approx(1.0, abs=1e-12)

    def test_true_class_dominates_at_small_sigma(self):
        cfg = molrg.MolrgConfig(n=50, dims=(5, 5, 5), delta=0.2)
        bases = molrg.gen_bases(cfg, seed=13)
        data = molrg.sample_dataset(cfg, bases, 10_000, seed=14)
        x, labels = molrg.stack_samples(data)
        xt = x + 0.06 * molrg.rng_from(15).standard_normal(x.shape)
        lv = analytic.logits_star(xt, 0.06, cfg, bases)
        hit = np.mean(np.argmax(lv.w, axis=1) == labels)
        assert hit >= 0.99


class TestPosteriorExact:
    def test_delta_one_collapses_to_scaled_projection(self):
        cfg = molrg.MolrgConfig(n=12, dims=(2, 2), delta=1.0)
        bases = molrg.gen_bases(cfg, seed=16)
        x = molrg.rng_from(17).standard_normal(12)
        span = bases.stacked()
        for sigma in (0.1, 0.9):
            got = analytic.posterior_exact(x, sigma, cfg, bases)
            want = span @ (span.T @ x) / (1 + sigma**2)
            np.testing.assert_allclose(got, want, atol=1e-12)

    def test_beta_form_equivalence(self):
        """Mixture-of-projectors equals the blockwise beta-weighted form."""
        cfg = molrg.MolrgConfig(n=20, dims=(3, 3, 3), delta=0.25)
        bases = molrg.gen_bases(cfg, seed=18)
        rng = molrg.rng_from(19)
        coeffs = [(0.08, None), (0.35, None), (1.2, None)]
        for sigma, _ in coeffs:
            from molrg_lab.schedule import coefficients

            c = coefficients(sigma, cfg.delta)
            x = rng.standard_normal(20)
            lv = analytic.logits_star(x, sigma, cfg, bases)
            mixture = sum(
                lv.w[k]
                * (
                    c.zeta * bases.u[k] @ (bases.u[k].T @ x)
                    + c.xi * bases.u_tilde[k] @ (bases.u_tilde[k].T @ x)
                )
                for k in range(3)
            )
            beta = c.xi + (c.zeta - c.xi) * lv.w
            blockwise = sum(
                beta[k] * bases.u[k] @ (bases.u[k].T @ x) for k in range(3)
            )
            np.testing.assert_allclose(mixture, blockwise, atol=1e-12)
            np.testing.assert_allclose(
                analytic.posterior_exact(x, sigma, cfg, bases), mixture, atol=1e-12
            )

    def test_conditional_mean_oracle(self):
        """Self-normalized importance estimate of E[x0 | x_t] from a million
        prior draws agrees within its own standard error."""
        cfg, bases = small_mixture()
        sigma = 0.5
        x_t = molrg.add_noise(
            molrg.sample_dataset(cfg, bases, 1, seed=6)[0].x0, sigma, seed=7
        )
        post = analytic.posterior_exact(x_t, sigma, cfg, bases)
        x0s, _ = molrg.stack_samples(molrg.sample_dataset(cfg, bases, 10**6, seed=8))
        logw = -np.sum((x0s - x_t) ** 2, axis=1) / (2 * sigma**2)
        logw -= logw.max()
        w = np.exp(logw)
        w /= w.sum()
        est = w @ x0s
        se = np.sqrt(np.sum((w[:, None] * (x0s - est)) ** 2, axis=0))
        assert np.abs(post - est).max() / se.min() < 6
        assert np.all(np.abs(post - est) < 4 * se + 1e-12)

    def test_not_linear_in_x(self):
        """The gate reacts to the input scale, so the full map is nonlinear;
        only the gate-frozen form is homogeneous."""
        cfg = molrg.MolrgConfig(n=20, dims=(3, 3), delta=0.2)
        bases = molrg.gen_bases(cfg, seed=20)
        x = molrg.sample_dataset(cfg, bases, 1, seed=21)[0].x0
        sigma = 0.5
        full = analytic.posterior_exact(3.0 * x, sigma, cfg, bases)
        scaled = 3.0 * analytic.posterior_exact(x, sigma, cfg, bases)
        assert np.abs(full - scaled).max() > 1e-6

    def test_nonuniform_mixing_consistent_with_score(self):
        cfg = molrg.MolrgConfig(n=10, dims=(2, 2), delta=0.3, mixing=(0.8, 0.2))
        bases = molrg.gen_bases(cfg, seed=22)
        x = molrg.rng_from(23).standard_normal(10)
        post = analytic.posterior_exact(x, 0.6, cfg, bases)
        np.testing.assert_allclose(
            post, x + 0.36 * analytic.score(x, 0.6, cfg, bases), atol=1e-10
        )


class TestExpectedLogitGap:
    def test_zero_at_delta_one(self):
        assert analytic.expected_logit_gap(0.5, 1.0, 5, 3) == 0.0

    def test_vanishes_monotonically_at_large_sigma(self):
        gaps = [analytic.expected_logit_gap(s, 0.2, 5, 3) for s in (1.0, 2.0, 4.0, 8.0)]
        assert all(a > b for a, b in zip(gaps, gaps[1:]))
        assert gaps[-1] < 0.05

    def test_monte_carlo_adjudication(self):
        """The adopted expression tracks Monte Carlo logit margins to < 2%;
        the alternative scaling (gap ~ (1-delta^2) d / (2 s^2 (1+s^2)))
        fails by an order of magnitude at small sigma."""
        d, K, delta, sigma = 5, 2, 0.2, 0.296
        cfg = molrg.MolrgConfig(n=2 * d + 4, dims=(d,) * K, delta=delta)
        bases = molrg.gen_bases(cfg, seed=1)
        x, labels = molrg.stack_samples(molrg.sample_dataset(cfg, bases, 100_000, seed=2))
        xt = x + sigma * molrg.rng_from(3).standard_normal(x.shape)
        g = analytic.logits_star(xt, sigma, cfg, bases).g
        own = g[np.arange(len(labels)), labels]
        other = (g.sum(axis=1) - own) / (K - 1)
        mc = float(np.mean(own - other))
        adopted = analytic.expected_logit_gap(sigma, delta, d, K)
        rejected = (1 - delta**2) * d / (2 * sigma**2 * (1 + sigma**2))
        assert abs(mc - adopted) / adopted < 0.02
        assert abs(mc - rejected) / mc > 0.02  # negative control

    def test_validation(self):
        with pytest.raises(InvalidForUnequalDims):
            analytic.expected_logit_gap(0.5, 0.2, 5, 1)


class TestExpectedWeights:
    def test_uniform_at_zero_gap(self):
        ew = analytic.expected_weights(0.5, 1.0, 5, 4)
        assert ew.w_plus == pytest.approx(0.25, abs=1e-15)
        assert ew.w_minus == pytest.approx(0.25, abs=1e-15)

    def test_two_class_logistic_point(self):
        """A gap of ln 3 with two classes puts 3/4 of the weight on top."""
        found = None
        # invert the gap expression for sigma at fixed d, delta
        d, delta, K = 5, 0.2, 2
        target = np.log(3.0)
        lo, hi = 0.01, 10.0
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if analytic.expected_logit_gap(mid, delta, d, K) > target:
                lo = mid
            else:
                hi = mid
        found = 0.5 * (lo + hi)
        ew = analytic.expected_weights(found, delta, d, K)
        assert ew.w_plus == pytest.approx(0.75, abs=1e-6)
        assert ew.w_minus == pytest.approx(0.25, abs=1e-6)

    def test_simplex_identity(self):
        for sigma in (0.01, 0.3, 2.0):
            for K in (2, 3, 8):
                ew = analytic.expected_weights(sigma, 0.3, 4, K)
                assert ew.w_plus + (K - 1) * ew.w_minus == pytest.approx(1.0, abs=1e-12)
                assert ew.w_plus >= 1 / K >= ew.w_minus

    def test_confidence_decreasing_in_sigma(self):
        grid = [0.002, 0.008, 0.023, 0.060, 0.140, 0.296, 0.585, 1.088, 1.923]
        w = [analytic.expected_weights(s, 0.2, 5, 3).w_plus for s in grid]
        assert all(a >= b for a, b in zip(w, w[1:]))

    def test_no_overflow_at_tiny_sigma(self):
        ew = analytic.expected_weights(1e-4, 0.2, 5, 3)
        assert ew.w_plus == 1.0 and ew.w_minus == 0.0


class TestPosteriorApprox:
    def test_equals_exact_at_delta_one(self):
        cfg = molrg.MolrgConfig(n=12, dims=(2, 2), delta=1.0)
        bases = molrg.gen_bases(cfg, seed=24)
        x = molrg.rng_from(25).standard_normal(12)
        np.testing.assert_allclose(
            analytic.posterior_approx(x, 0.5, cfg, bases, 0),
            analytic.posterior_exact(x, 0.5, cfg, bases),
            atol=1e-12,
        )

    def test_one_hot_limit_at_small_sigma(self):
        from molrg_lab.schedule import coefficients

        cfg = molrg.MolrgConfig(n=20, dims=(3, 3), delta=0.2)
        bases = molrg.gen_bases(cfg, seed=26)
        x = molrg.rng_from(27).standard_normal(20)
        sigma = 0.01
        c = coefficients(sigma, cfg.delta)
        got = analytic.posterior_approx(x, sigma, cfg, bases, 1)
        want = c.zeta * bases.u[1] @ (bases.u[1].T @ x) + c.xi * bases.u_tilde[1] @ (
            bases.u_tilde[1].T @ x
        )
        np.testing.assert_allclose(got, want, atol=1e-10)

    def test_per_row_labels(self):
        cfg = molrg.MolrgConfig(n=20, dims=(3, 3), delta=0.2)
        bases = molrg.gen_bases(cfg, seed=28)
        x = molrg.rng_from(29).standard_normal((4, 20))
        labels = np.array([0, 1, 0, 1])
        batch = analytic.posterior_approx(x, 0.3, cfg, bases, labels)
        for i in range(4):
            np.testing.assert_allclose(
                batch[i],
                analytic.posterior_approx(x[i], 0.3, cfg, bases, int(labels[i])),
                atol=1e-12,
            )

    def test_unequal_dims_rejected(self):
        cfg = molrg.MolrgConfig(n=20, dims=(4, 2), delta=0.2)
        bases = molrg.gen_bases(cfg, seed=30)
        with pytest.raises(InvalidForUnequalDims):
            analytic.posterior_approx(np.zeros(20), 0.3, cfg, bases, 0)


class TestFineToCoarseOrdering:
    def test_tilde_share_shrinks_with_sigma(self):
        """For a fixed clean input the reconstructed shared-span share decays
        relative to the class-span share as sigma grows."""
        cfg = molrg.MolrgConfig(n=30, dims=(4, 4), delta=0.3)
        bases = molrg.gen_bases(cfg, seed=31)
        s = molrg.sample_dataset(cfg, bases, 1, seed=32)[0]
        k = s.label
        ratios = []
        for sigma in (0.05, 0.2, 0.8, 2.0):
            xhat = analytic.posterior_exact(s.x0, sigma, cfg, bases)
            num = np.linalg.norm(bases.u_tilde[k].T @ xhat)
            den = np.linalg.norm(bases.u[k].T @ xhat)
            ratios.append(num / den)
        assert all(a > b for a, b in zip(ratios, ratios[1:]))
