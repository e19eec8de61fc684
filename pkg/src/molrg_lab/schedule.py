"""Discrete diffusion noise grids and per-level coefficients.

All noise levels follow the variance-exploding convention x_t = x_0 + sigma_t * eps
(unit signal scaling), so sigma_t is the only knob per level.  Every scalar that
downstream code derives from a level lives in DiffusionCoefficients:

    zeta  = 1 / (1 + sigma^2)            shrinkage on class subspaces
    xi    = delta^2 / (delta^2 + sigma^2) shrinkage on the shared noise span
    phi   = zeta / (2 sigma^2)            logit scale for class energy
    psi   = xi / (2 sigma^2)              logit scale for shared energy
    gamma = sigma                         effective noise std
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import (
    InvalidBetaRange,
    LengthMismatch,
    NonPositiveDelta,
    NonPositiveSigma,
    NotSorted,
    SchemaMismatch,
)

# Levels below this are rejected: the gating logits carry 1/sigma^2 factors and
# stop being representable well before sigma reaches zero.
SIGMA_MIN = 1e-4


def _check_sigma(sigma: float) -> float:
    sigma = float(sigma)
    if not np.isfinite(sigma) or sigma < SIGMA_MIN:
        raise NonPositiveSigma(f"sigma must be >= {SIGMA_MIN}, got {sigma}")
    return sigma


def _check_delta(delta: float) -> float:
    delta = float(delta)
    if not np.isfinite(delta) or delta <= 0.0:
        raise NonPositiveDelta(f"delta must be > 0, got {delta}")
    return delta


def _frozen(values, dtype=np.float64) -> np.ndarray:
    arr = np.array(values, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class NoiseSchedule:
    """Validated, immutable grid of noise levels with per-level loss weights."""

    sigmas: np.ndarray
    weights: np.ndarray
    kind: str = "explicit-grid"

    def __len__(self) -> int:
        return len(self.sigmas)

    def subset(self, indices) -> "NoiseSchedule":
        """Schedule restricted to the given level indices (order preserved)."""
        idx = np.asarray(indices, dtype=int)
        return NoiseSchedule(
            sigmas=_frozen(self.sigmas[idx]),
            weights=_frozen(self.weights[idx]),
            kind=self.kind,
        )


@dataclass(frozen=True)
class DiffusionCoefficients:
    sigma: float
    zeta: float
    xi: float
    phi: float
    psi: float
    gamma: float


def make_explicit_schedule(sigmas, weights=None) -> NoiseSchedule:
    """Build a schedule from an explicit strictly increasing sigma grid.

    Weights default to 1 at every level; the optimal denoiser does not depend
    on them, so uniform weighting is the neutral choice.
    """
    sig = np.asarray(sigmas, dtype=np.float64)
    if sig.ndim != 1 or sig.size == 0:
        raise NotSorted("sigmas must be a non-empty 1-D sequence")
    for s in sig:
        _check_sigma(s)
    if np.any(np.diff(sig) <= 0):
        raise NotSorted("sigmas must be strictly increasing")
    if weights is None:
        wts = np.ones_like(sig)
    else:
        wts = np.asarray(weights, dtype=np.float64)
        if wts.shape != sig.shape:
            raise LengthMismatch(
                f"weights length {wts.size} != sigmas length {sig.size}"
            )
        if np.any(wts <= 0) or not np.all(np.isfinite(wts)):
            raise LengthMismatch("weights must be positive and finite")
    return NoiseSchedule(sigmas=_frozen(sig), weights=_frozen(wts), kind="explicit-grid")


def make_ddpm_schedule(T: int, beta_min: float, beta_max: float) -> NoiseSchedule:
    """Linear-beta DDPM grid converted to the unit-scaling convention.

    beta_i is linearly spaced on [beta_min, beta_max], alpha_bar_t is the
    running product of (1 - beta_i), and sigma_t = sqrt((1 - alpha_bar_t) / alpha_bar_t),
    which is the noise-to-signal ratio after rescaling x_t by 1/sqrt(alpha_bar_t).
    """
    T = int(T)
    if T < 1:
        raise InvalidBetaRange(f"T must be >= 1, got {T}")
    beta_min = float(beta_min)
    beta_max = float(beta_max)
    if not (0.0 < beta_min < beta_max < 1.0):
        raise InvalidBetaRange(
            f"need 0 < beta_min < beta_max < 1, got ({beta_min}, {beta_max})"
        )
    betas = np.linspace(beta_min, beta_max, T)
    alpha_bar = np.cumprod(1.0 - betas)
    sigmas = np.sqrt((1.0 - alpha_bar) / alpha_bar)
    return NoiseSchedule(
        sigmas=_frozen(sigmas), weights=_frozen(np.ones(T)), kind="ddpm-linear-beta"
    )


def coefficients(sigma: float, delta: float) -> DiffusionCoefficients:
    """All per-level scalars derived from (sigma, delta)."""
    sigma = _check_sigma(sigma)
    delta = _check_delta(delta)
    s2 = sigma * sigma
    d2 = delta * delta
    zeta = 1.0 / (1.0 + s2)
    xi = d2 / (d2 + s2)
    return DiffusionCoefficients(
        sigma=sigma,
        zeta=zeta,
        xi=xi,
        phi=zeta / (2.0 * s2),
        psi=xi / (2.0 * s2),
        gamma=sigma,
    )


def schedule_to_json(schedule: NoiseSchedule) -> str:
    """Serialize as the explicit-grid JSON descriptor."""
    return json.dumps(
        {
            "kind": "explicit",
            "sigmas": [float(s) for s in schedule.sigmas],
            "weights": [float(w) for w in schedule.weights],
        }
    )


def schedule_from_json(descriptor) -> NoiseSchedule:
    """Load a schedule from a JSON descriptor (string or parsed dict).

    Two forms are accepted:
      {"kind": "explicit", "sigmas": [...], "weights": [...]}
      {"kind": "ddpm", "T": 500, "beta_min": 1e-4, "beta_max": 0.02}
    """
    if isinstance(descriptor, str):
        descriptor = json.loads(descriptor)
    kind = descriptor.get("kind")
    if kind == "explicit":
        return make_explicit_schedule(descriptor["sigmas"], descriptor.get("weights"))
    if kind == "ddpm":
        return make_ddpm_schedule(
            descriptor["T"], descriptor["beta_min"], descriptor["beta_max"]
        )
    raise SchemaMismatch(f"unknown schedule kind {kind!r}")
