"""Representation-quality measurement.

The central quantity is a per-class signal-to-noise ratio of a denoiser's
output: energy of the reconstruction inside the true class subspace over the
energy of the residual outside it, with the per-class ratios of expectations
averaged over classes.  Alongside the empirical estimator there is the exact
closed form for the constant-gate denoiser, its energy decomposition, a
PCA-based variant for arbitrary feature sets, the denoising-rate versus
class-confidence trade-off, and a small unimodality diagnostic for curves.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import analytic
from .dae import DaeParams, denoise
from .errors import ClassMissing, CurveTooShort, RankTooLarge
from .molrg import BasisSet, MolrgConfig, rng_from, stack_samples
from .schedule import NoiseSchedule, _check_sigma

SNR_CAP = 1e6


@dataclass
class SnrCurve:
    """(sigma, value) series with the estimator tag and provenance metadata."""

    points: list  # [(sigma, value), ...]
    estimator: str
    meta: dict = field(default_factory=dict)

    @property
    def sigmas(self):
        return [p[0] for p in self.points]

    @property
    def values(self):
        return [p[1] for p in self.points]

    def to_csv(self, path):
        m = self.meta
        lines = ["sigma,value,estimator,n,d,K,delta,seed"]
        for sig, val in self.points:
            lines.append(
                f"{float(sig)!r},{float(val)!r},{self.estimator},{m.get('n', '')},{m.get('d', '')},"
                f"{m.get('K', '')},{m.get('delta', '')},{m.get('seed', '')}"
            )
        Path(path).write_text("\n".join(lines) + "\n")


@dataclass
class TradeoffCurve:
    """Per level: denoising rate sigma^2/delta^2 against the confidence rates
    h(w_plus) and h(w_minus), h(w, delta) = (1 - delta^2) w + delta^2."""

    points: list  # [(sigma, denoise_rate, h_plus, h_minus), ...]

    def to_csv(self, path):
        lines = ["sigma,denoise_rate,h_plus,h_minus"]
        for sig, rate, hp, hm in self.points:
            lines.append(f"{float(sig)!r},{float(rate)!r},{float(hp)!r},{float(hm)!r}")
        Path(path).write_text("\n".join(lines) + "\n")


@dataclass(frozen=True)
class UnimodalityReport:
    peak_index: int
    interior_peak: bool
    prominence: float


def exact_denoiser(config: MolrgConfig, bases: BasisSet):
    """Optimal posterior-mean denoiser as a (x, sigma, labels) callable."""

    def model(x, sigma, labels=None):
        return analytic.posterior_exact(x, sigma, config, bases)

    return model


def approx_denoiser(config: MolrgConfig, bases: BasisSet):
    """Constant-gate denoiser; needs the true labels to place the large weight."""

    def model(x, sigma, labels):
        return analytic.posterior_approx(x, sigma, config, bases, labels)

    return model


def dae_denoiser(params: DaeParams, delta: float):
    def model(x, sigma, labels=None):
        return denoise(params, x, sigma, delta)

    return model


def _ratio(num: float, den: float):
    if den <= 0.0:
        return (0.0, False) if num <= 0.0 else (SNR_CAP, True)
    return num / den, False


def snr_empirical_per_class(
    model, dataset, bases: BasisSet, sigma: float, mc_draws: int = 1, seed=0, noising=True
):
    """Per-class ratios of expectations for an arbitrary denoiser callable.

    For each class k, the numerator averages |P_k x_hat|^2 over class-k samples
    and noise draws, the denominator averages |x_hat - P_k x_hat|^2; the model
    is called as model(x_batch, sigma, labels).
    """
    sigma = _check_sigma(sigma)
    x0, labels = stack_samples(dataset)
    k_count = bases.K
    ratios = np.zeros(k_count)
    saturated = False
    for k in range(k_count):
        idx = np.flatnonzero(labels == k)
        if idx.size == 0:
            raise ClassMissing(f"class {k} has no samples")
        xk = x0[idx]
        num = den = 0.0
        draws = mc_draws if noising else 1
        for j in range(draws):
            if noising:
                eps = rng_from(seed, 6, k, j).standard_normal(xk.shape)
                xin = xk + sigma * eps
            else:
                xin = xk
            xhat = model(xin, sigma, labels[idx])
            proj = (xhat @ bases.u[k]) @ bases.u[k].T
            num += float(np.mean(np.einsum("ij,ij->i", proj, proj)))
            res = xhat - proj
            den += float(np.mean(np.einsum("ij,ij->i", res, res)))
        ratios[k], sat = _ratio(num / draws, den / draws)
        saturated = saturated or sat
    return ratios, saturated


def snr_empirical(
    model, dataset, bases: BasisSet, sigma: float, mc_draws: int = 1, seed=0,
    aggregate: str = "ratio-mean",
) -> float:
    """Class-averaged empirical SNR of a denoiser at one noise level.

    aggregate="ratio-mean" (default) averages the per-class ratios;
    "pooled" forms a single ratio of pooled numerators and denominators,
    exposed for sensitivity analysis only.
    """
    if aggregate == "pooled":
        return _snr_pooled(model, dataset, bases, sigma, mc_draws, seed)
    ratios, _ = snr_empirical_per_class(model, dataset, bases, sigma, mc_draws, seed)
    return float(np.mean(ratios))


def _snr_pooled(model, dataset, bases, sigma, mc_draws, seed):
    sigma = _check_sigma(sigma)
    x0, labels = stack_samples(dataset)
    num = den = 0.0
    for k in range(bases.K):
        idx = np.flatnonzero(labels == k)
        if idx.size == 0:
            raise ClassMissing(f"class {k} has no samples")
        xk = x0[idx]
        share = idx.size / len(dataset)
        for j in range(mc_draws):
            eps = rng_from(seed, 6, k, j).standard_normal(xk.shape)
            xhat = model(xk + sigma * eps, sigma, labels[idx])
            proj = (xhat @ bases.u[k]) @ bases.u[k].T
            res = xhat - proj
            num += share * float(np.mean(np.einsum("ij,ij->i", proj, proj))) / mc_draws
            den += share * float(np.mean(np.einsum("ij,ij->i", res, res))) / mc_draws
    value, _ = _ratio(num, den)
    return float(value)


def snr_closed_form(sigma: float, delta: float, d: int, K: int) -> float:
    """Exact SNR of the constant-gate denoiser:

        (1 + s^2) / ((K-1)(delta^2 + s^2)) *
        ((1 + (s^2/delta^2) h(w_plus)) / (1 + (s^2/delta^2) h(w_minus)))^2

    At delta = 1 both confidence rates equal 1 and the value collapses to
    exactly 1/(K-1) for every sigma.
    """
    ew = analytic.expected_weights(sigma, delta, d, K)
    s2 = sigma * sigma
    d2 = delta * delta
    h_plus = (1.0 - d2) * ew.w_plus + d2
    h_minus = (1.0 - d2) * ew.w_minus + d2
    ratio = (1.0 + (s2 / d2) * h_plus) / (1.0 + (s2 / d2) * h_minus)
    c = (1.0 + s2) / (d2 + s2)
    return float(c / (K - 1) * ratio * ratio)


def snr_components(sigma: float, delta: float, d: int, K: int):
    """Expected reconstruction energies of the constant-gate denoiser for a
    class-k sample: inside the true subspace, inside each wrong subspace, and
    in total.  Their ratio reproduces snr_closed_form identically."""
    ew = analytic.expected_weights(sigma, delta, d, K)
    s2 = sigma * sigma
    d2 = delta * delta
    correct = (
        ew.w_plus / (1.0 + s2) + (K - 1) * d2 * ew.w_minus / (d2 + s2)
    ) ** 2 * (1.0 + s2) * d
    other = (
        ew.w_minus / (1.0 + s2)
        + d2 * (ew.w_plus + (K - 2) * ew.w_minus) / (d2 + s2)
    ) ** 2 * (d2 + s2) * d
    total = correct + (K - 1) * other
    return correct, other, total


def snr_clean_input(
    sigma: float, delta: float, d: int, K: int, dataset, bases: BasisSet, seed=0
) -> float:
    """SNR of the optimal denoiser fed clean samples but run with the
    level-sigma coefficients (no corruption step)."""
    n = bases.u[0].shape[0]
    config = MolrgConfig(n=n, dims=tuple(b.shape[1] for b in bases.u), delta=delta)
    ratios, _ = snr_empirical_per_class(
        exact_denoiser(config, bases), dataset, bases, sigma, mc_draws=1, seed=seed,
        noising=False,
    )
    return float(np.mean(ratios))


def snr_pca_single(features: np.ndarray, labels: np.ndarray, rank: int):
    """PCA-based SNR of one feature batch.

    Features are normalized to unit length, the global mean is subtracted
    (in that order), each class contributes its top-rank right singular
    vectors as the class basis, and the usual per-class ratio is averaged.
    Returns (value, saturated).
    """
    h = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if rank < 1 or rank > h.shape[1]:
        raise RankTooLarge(f"rank {rank} not in [1, {h.shape[1]}]")
    norms = np.linalg.norm(h, axis=1, keepdims=True)
    h = h / np.where(norms == 0, 1.0, norms)
    h = h - h.mean(axis=0, keepdims=True)
    classes = np.unique(labels)
    ratios = []
    saturated = False
    for k in classes:
        hk = h[labels == k]
        if hk.shape[0] < rank:
            raise RankTooLarge(f"class {k} has {hk.shape[0]} samples < rank {rank}")
        _, _, vh = np.linalg.svd(hk, full_matrices=False)
        v = vh[:rank].T
        zk = hk @ v
        num = float(np.mean(np.einsum("ij,ij->i", zk, zk)))
        tot = float(np.mean(np.einsum("ij,ij->i", hk, hk)))
        value, sat = _ratio(num, max(tot - num, 0.0))
        ratios.append(value)
        saturated = saturated or sat
    if len(ratios) == 0:
        raise ClassMissing("no classes present")
    return float(np.mean(ratios)), saturated


def snr_pca(feature_batches, rank: int, meta: dict = None) -> SnrCurve:
    """PCA-based SNR across a sweep of feature batches (one per level)."""
    points = []
    flags = []
    for batch in feature_batches:
        value, sat = snr_pca_single(batch.h, batch.labels, rank)
        points.append((float(batch.sigma), value))
        flags.append(sat)
    out_meta = dict(meta or {})
    out_meta["rank"] = rank
    out_meta["saturated"] = flags
    return SnrCurve(points=points, estimator="pca", meta=out_meta)


def confidence_rate(w: float, delta: float) -> float:
    """h(w, delta) = (1 - delta^2) w + delta^2, increasing in w."""
    d2 = delta * delta
    return float((1.0 - d2) * w + d2)


def tradeoff_curve(schedule: NoiseSchedule, delta: float, d: int, K: int) -> TradeoffCurve:
    """Denoising rate against class-confidence rates across the grid."""
    points = []
    for sig in schedule.sigmas:
        ew = analytic.expected_weights(float(sig), delta, d, K)
        points.append(
            (
                float(sig),
                float(sig) ** 2 / delta**2,
                confidence_rate(ew.w_plus, delta),
                confidence_rate(ew.w_minus, delta),
            )
        )
    return TradeoffCurve(points=points)


def unimodality_index(curve, tau: float = 0.05) -> UnimodalityReport:
    """Classify a curve as interior-peaked or not.

    peak_index is the argmax (first on ties); the peak counts as interior when
    it sits strictly inside the grid and exceeds both endpoints by relative
    prominence at least tau, prominence = (peak - max(endpoints)) / max(peak, eps).
    Accepts any SnrCurve/ProbeCurve-like object with .values, or a sequence.
    """
    values = np.asarray(getattr(curve, "values", curve), dtype=np.float64)
    if values.ndim != 1 or values.size < 3:
        raise CurveTooShort("need at least 3 points")
    peak = int(np.argmax(values))
    peak_val = float(values[peak])
    ends = max(float(values[0]), float(values[-1]))
    prominence = (peak_val - ends) / max(peak_val, 1e-12)
    interior = bool(0 < peak < values.size - 1 and prominence >= tau)
    return UnimodalityReport(peak_index=peak, interior_peak=interior, prominence=float(prominence))
