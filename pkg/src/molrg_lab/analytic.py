"""Closed-form quantities of the noisy mixture model at noise level sigma.

The corrupted density is a K-component Gaussian mixture whose component k has
mean mu_k and covariance U_k U_k^T + delta^2 Utilde_k Utilde_k^T + sigma^2 I.
Everything here is derived from that fact: exact log-density, score, the
posterior mean E[x0 | x_t] (the optimal denoiser), the gating softmax it
induces, and the constant-weight approximation of the posterior together with
its expected softmax weights.

Quadratic forms are always evaluated through the thin basis factors, never by
forming n x n projectors, so the per-class cost stays O(n d).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidForUnequalDims, MolrgLabError, OverlapUnsupported
from .molrg import BasisSet, MolrgConfig
from .schedule import _check_delta, _check_sigma, coefficients

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class LogitVector:
    """Per-class gating logits and their softmax weights."""

    g: np.ndarray
    w: np.ndarray


@dataclass(frozen=True)
class ExpectedWeights:
    """Softmax of the expected logits: confidence on the true class (w_plus)
    and on each wrong class (w_minus)."""

    w_plus: float
    w_minus: float
    logit_gap: float


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically safe softmax (max subtraction before exponentiation)."""
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def _as_batch(x) -> tuple:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return x[None, :], True
    return x, False


def _component_stats(x: np.ndarray, sigma: float, config: MolrgConfig, bases: BasisSet):
    """Per-component log-densities and posterior means for a batch.

    Returns (log_norm (m,K) including log mixing weights, post (K,m,n)).
    Orthogonal bases use the diagonalized form with the determinant identity
    det = (1+s^2)^d (delta^2+s^2)^D (s^2)^(n-d-D); general bases go through
    the (d+D) x (d+D) capacitance matrix of the thin factor [U_k, delta*Utilde_k].
    """
    m, n = x.shape
    s2 = sigma * sigma
    d2 = config.delta * config.delta
    k_count = config.K
    log_norm = np.empty((m, k_count))
    post = np.empty((k_count, m, n))
    log_mix = np.log(np.asarray(config.mixing, dtype=np.float64))
    for k in range(k_count):
        uk, utk = bases.u[k], bases.u_tilde[k]
        dk, Dk = uk.shape[1], utk.shape[1]
        y = x - config.mean(k)
        total = np.einsum("ij,ij->i", y, y)
        if bases.orthogonal:
            zu = y @ uk
            zt = y @ utk
            eu = np.einsum("ij,ij->i", zu, zu)
            et = np.einsum("ij,ij->i", zt, zt)
            zeta = 1.0 / (1.0 + s2)
            xi = d2 / (d2 + s2)
            logdet = (
                dk * np.log(1.0 + s2)
                + Dk * np.log(d2 + s2)
                + (n - dk - Dk) * np.log(s2)
            )
            quad = (total - zeta * eu - xi * et) / s2
            post[k] = config.mean(k) + zeta * (zu @ uk.T) + xi * (zt @ utk.T)
        else:
            uhat = np.concatenate([uk, config.delta * utk], axis=1)
            cap = uhat.T @ uhat + s2 * np.eye(dk + Dk)
            chol = np.linalg.cholesky(cap)
            z = y @ uhat
            half = np.linalg.solve(chol, z.T)  # (dk+Dk, m)
            quad = (total - np.einsum("ji,ji->i", half, half)) / s2
            logdet = (n - dk - Dk) * np.log(s2) + 2.0 * np.sum(
                np.log(np.diag(chol))
            )
            sol = np.linalg.solve(chol.T, half).T  # cap^{-1} z per row
            post[k] = config.mean(k) + sol @ uhat.T
        log_norm[:, k] = log_mix[k] - 0.5 * (n * LOG_2PI + logdet + quad)
    return log_norm, post


def log_density(x, sigma: float, config: MolrgConfig, bases: BasisSet):
    """log p_sigma(x) of the corrupted mixture, via log-sum-exp over classes."""
    sigma = _check_sigma(sigma)
    xb, single = _as_batch(x)
    log_norm, _ = _component_stats(xb, sigma, config, bases)
    peak = log_norm.max(axis=1, keepdims=True)
    out = peak[:, 0] + np.log(np.exp(log_norm - peak).sum(axis=1))
    return float(out[0]) if single else out


def _responsibilities(xb, sigma, config, bases):
    log_norm, post = _component_stats(xb, sigma, config, bases)
    return softmax(log_norm, axis=1), post


def score(x, sigma: float, config: MolrgConfig, bases: BasisSet):
    """Gradient of log_density in x.

    Each component contributes -(C_k + sigma^2 I)^{-1} (x - mu_k), weighted by
    its posterior responsibility; with the posterior-mean identity this is
    (posterior_mean - x) / sigma^2.
    """
    sigma = _check_sigma(sigma)
    xb, single = _as_batch(x)
    resp, post = _responsibilities(xb, sigma, config, bases)
    mean = np.einsum("mk,kmn->mn", resp, post)
    out = (mean - xb) / (sigma * sigma)
    return out[0] if single else out


def posterior_exact(x, sigma: float, config: MolrgConfig, bases: BasisSet):
    """Optimal denoiser E[x0 | x_t = x]: responsibility-weighted mixture of the
    per-class shrunken projections.

    For uniform mixing, zero means and orthogonal bases the responsibilities
    reduce to the gating softmax of logits_star.
    """
    sigma = _check_sigma(sigma)
    xb, single = _as_batch(x)
    resp, post = _responsibilities(xb, sigma, config, bases)
    mean = np.einsum("mk,kmn->mn", resp, post)
    return mean[0] if single else mean


def logits_star(x, sigma: float, config: MolrgConfig, bases: BasisSet):
    """Gating logits at the ground-truth bases and their softmax.

    g_l = phi * |U_l^T x|^2 + psi * |Utilde_l^T x|^2.  Mixing weights are not
    included: this is the gate of the structured denoiser, which matches the
    exact posterior responsibilities only under uniform mixing.
    """
    coeff = coefficients(sigma, config.delta)
    xb, single = _as_batch(x)
    g = np.empty((xb.shape[0], config.K))
    for k in range(config.K):
        zu = xb @ bases.u[k]
        zt = xb @ bases.u_tilde[k]
        g[:, k] = coeff.phi * np.einsum("ij,ij->i", zu, zu) + coeff.psi * np.einsum(
            "ij,ij->i", zt, zt
        )
    w = softmax(g, axis=1)
    if single:
        return LogitVector(g=g[0], w=w[0])
    return LogitVector(g=g, w=w)


def _require_equal_dims(d, K):
    if K < 2:
        raise InvalidForUnequalDims("closed forms need at least two classes")
    if d < 1:
        raise InvalidForUnequalDims("subspace dimension must be >= 1")


def expected_logit_gap(sigma: float, delta: float, d: int, K: int) -> float:
    """Expected gating-logit margin of the true class over any wrong class,
    for equal dims, orthogonal bases and zero means:

        (1 - delta^2)^2 d / (2 (1 + sigma^2) (delta^2 + sigma^2))

    The big per-energy logit scales cancel in the difference, which is why the
    margin stays finite as sigma shrinks relative to the raw logits.
    """
    sigma = _check_sigma(sigma)
    delta = _check_delta(delta)
    _require_equal_dims(d, K)
    s2 = sigma * sigma
    d2 = delta * delta
    return (1.0 - d2) ** 2 * d / (2.0 * (1.0 + s2) * (d2 + s2))


def expected_weights(sigma: float, delta: float, d: int, K: int) -> ExpectedWeights:
    """Softmax of the expected logits: one large weight on the true class,
    K-1 equal small weights elsewhere.  Evaluated with exp(-gap) so it never
    overflows even when the gap is huge at small sigma."""
    gap = expected_logit_gap(sigma, delta, d, K)
    q = float(np.exp(-gap))
    denom = 1.0 + (K - 1) * q
    return ExpectedWeights(w_plus=1.0 / denom, w_minus=q / denom, logit_gap=gap)


def posterior_approx(
    x, sigma: float, config: MolrgConfig, bases: BasisSet, label
):
    """Constant-gate denoiser: the exact posterior with the softmax replaced by
    the expected weights of the sample's source class.

    This is an analysis device rather than a usable denoiser, since it needs
    the true label to place the large weight.  label may be a scalar (applied
    to every row) or a per-row vector.
    """
    sigma = _check_sigma(sigma)
    if not bases.orthogonal:
        raise OverlapUnsupported("constant-gate form needs orthogonal bases")
    if config.means is not None:
        raise MolrgLabError("constant-gate form needs zero class means")
    dims = set(config.dims)
    if len(dims) != 1:
        raise InvalidForUnequalDims("constant-gate form needs equal dims")
    d = config.dims[0]
    ew = expected_weights(sigma, config.delta, d, config.K)
    coeff = coefficients(sigma, config.delta)
    xb, single = _as_batch(x)
    labels = np.full(xb.shape[0], label) if np.ndim(label) == 0 else np.asarray(label)
    w = np.full((xb.shape[0], config.K), ew.w_minus)
    w[np.arange(xb.shape[0]), labels] = ew.w_plus
    beta = coeff.xi + (coeff.zeta - coeff.xi) * w
    u_all = bases.stacked()
    z = xb @ u_all
    expand = np.repeat(beta, config.dims, axis=1)
    out = (expand * z) @ u_all.T
    return out[0] if single else out
