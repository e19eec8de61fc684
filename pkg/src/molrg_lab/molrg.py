"""Mixture-of-low-rank-Gaussians data model.

Each class k owns an orthonormal basis U_k (n x d_k).  A class-k sample is

    x0 = U_k a + delta * Utilde_k e + mu_k,   a ~ N(0, I_{d_k}), e ~ N(0, I_{D_k})

where Utilde_k spans the union of the other classes' subspaces (D_k = sum of
their dimensions) and mu_k is an optional class mean.  Controlled violations
of the baseline assumptions are supported: a shared principal angle between
two class subspaces, unequal per-class ranks, non-uniform mixing weights, and
mean-separated clusters.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import (
    DimensionOverflow,
    LengthMismatch,
    NonPositiveDelta,
    OverlapUnsupported,
)
from .schedule import _check_sigma

MIXING_TOL = 1e-12


def rng_from(seed, *keys) -> np.random.Generator:
    """Deterministic generator for (seed, sub-stream keys); nested int tuples
    in seed or keys are flattened into the entropy pool."""

    def flat(parts):
        for p in parts:
            if isinstance(p, (tuple, list)):
                yield from flat(p)
            else:
                yield int(p)

    return np.random.default_rng(np.random.SeedSequence(list(flat([seed, *keys]))))


@dataclass(frozen=True)
class MolrgConfig:
    """Shape and noise parameters of the generative model.

    overlap_angle is the shared principal angle (degrees) between the two
    class subspaces; 90 means mutually orthogonal classes.  means, when given,
    holds one length-n vector per class.
    """

    n: int
    dims: tuple
    delta: float
    mixing: tuple = None
    overlap_angle: float = 90.0
    means: tuple = None

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if self.n < 1 or any(d < 1 for d in self.dims):
            raise DimensionOverflow("n and all subspace dims must be >= 1")
        if not (float(self.delta) > 0.0):
            raise NonPositiveDelta(f"delta must be > 0, got {self.delta}")
        object.__setattr__(self, "delta", float(self.delta))
        k = len(self.dims)
        if self.mixing is None:
            object.__setattr__(self, "mixing", tuple(1.0 / k for _ in range(k)))
        else:
            mix = tuple(float(p) for p in self.mixing)
            if len(mix) != k:
                raise LengthMismatch("mixing length must equal number of classes")
            if any(p < 0 for p in mix) or abs(sum(mix) - 1.0) > MIXING_TOL:
                raise LengthMismatch("mixing weights must be >= 0 and sum to 1")
            object.__setattr__(self, "mixing", mix)
        angle = float(self.overlap_angle)
        object.__setattr__(self, "overlap_angle", angle)
        if angle != 90.0:
            if k != 2:
                raise OverlapUnsupported("overlap_angle != 90 needs exactly 2 classes")
            if len(set(self.dims)) != 1:
                raise OverlapUnsupported("overlapping classes need equal dims")
            if not (0.0 < angle <= 90.0):
                raise OverlapUnsupported(f"angle must be in (0, 90], got {angle}")
        elif sum(self.dims) > self.n:
            raise DimensionOverflow(
                f"sum of dims {sum(self.dims)} exceeds ambient dimension {self.n}"
            )
        if self.means is not None:
            means = tuple(np.asarray(m, dtype=np.float64) for m in self.means)
            if len(means) != k or any(m.shape != (self.n,) for m in means):
                raise LengthMismatch("means must hold one length-n vector per class")
            for m in means:
                m.setflags(write=False)
            object.__setattr__(self, "means", means)

    @property
    def K(self) -> int:
        return len(self.dims)

    def mean(self, k: int) -> np.ndarray:
        if self.means is None:
            return np.zeros(self.n)
        return self.means[k]


@dataclass(frozen=True)
class BasisSet:
    """Per-class bases plus the shared-noise and complement bases.

    u[k] is n x d_k, u_tilde[k] is n x D_k spanning the union of the other
    classes' subspaces, u_perp is an orthonormal basis for everything
    orthogonal to all class subspaces.
    """

    u: tuple
    u_tilde: tuple
    u_perp: np.ndarray
    orthogonal: bool = True

    @property
    def K(self) -> int:
        return len(self.u)

    def stacked(self) -> np.ndarray:
        """All class bases concatenated column-wise (n x sum d_k)."""
        return np.concatenate(self.u, axis=1)


@dataclass(frozen=True)
class Sample:
    x0: np.ndarray
    label: int
    latents: tuple = None  # (a, e) coefficient vectors when retained


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


def _complement(basis: np.ndarray, n: int) -> np.ndarray:
    """Orthonormal basis of the orthogonal complement of col(basis)."""
    m = basis.shape[1]
    if m == 0:
        return np.eye(n)
    if m == n:
        return np.zeros((n, 0))
    w, _, _ = np.linalg.svd(basis, full_matrices=True)
    return w[:, m:]


def _orthonormalize(g: np.ndarray) -> np.ndarray:
    q, r = np.linalg.qr(g)
    # fix column signs so the factorization is a continuous function of g
    return q * np.sign(np.where(np.diag(r) == 0, 1.0, np.diag(r)))


def gen_bases(config: MolrgConfig, seed=0) -> BasisSet:
    """Sample the class bases for a configuration.

    seed=None selects the identity-aligned convention: class bases are the
    leading canonical axes in class order (useful for hand-checkable tests).
    When class means are present, the subspaces are built orthogonal to the
    span of the means so the means live in the complement space.
    """
    n, dims = config.n, config.dims
    total = sum(dims)
    mean_basis = None
    if config.means is not None and any(np.any(m != 0) for m in config.means):
        stacked = np.stack(config.means, axis=1)
        w, s, _ = np.linalg.svd(stacked, full_matrices=False)
        mean_basis = w[:, s > 1e-12 * s[0]]
        if total + mean_basis.shape[1] > n:
            raise DimensionOverflow(
                "class subspaces plus mean directions exceed ambient dimension"
            )

    if seed is None:
        g = np.eye(n)[:, :total]
    else:
        g = rng_from(seed, 0).standard_normal((n, total))
    if mean_basis is not None:
        g = g - mean_basis @ (mean_basis.T @ g)
    q = _orthonormalize(g)

    if config.overlap_angle == 90.0:
        splits = np.cumsum(dims)[:-1]
        blocks = np.split(q, splits, axis=1)
        u = tuple(_freeze(b) for b in blocks)
        u_tilde = tuple(
            _freeze(np.concatenate([b for j, b in enumerate(blocks) if j != k], axis=1))
            for k in range(len(dims))
        )
        u_perp = _freeze(_complement(q, n))
        return BasisSet(u=u, u_tilde=u_tilde, u_perp=u_perp, orthogonal=True)

    # two classes sharing principal angle theta: rotate paired directions
    d = dims[0]
    if 2 * d > n:
        raise DimensionOverflow("overlap construction needs 2*d <= n")
    theta = np.deg2rad(config.overlap_angle)
    qa, qb = q[:, :d], q[:, d:]
    u1 = qa
    u2 = np.cos(theta) * qa + np.sin(theta) * qb
    u = (_freeze(u1), _freeze(u2))
    u_tilde = (_freeze(u2), _freeze(u1))
    u_perp = _freeze(_complement(q, n))
    return BasisSet(u=u, u_tilde=u_tilde, u_perp=u_perp, orthogonal=False)


def sample_dataset(config: MolrgConfig, bases: BasisSet, count: int, seed=0) -> list:
    """Draw count samples; latent coefficients are retained on each Sample."""
    if count < 1:
        raise LengthMismatch(f"count must be >= 1, got {count}")
    rng = rng_from(seed, 1)
    labels = rng.choice(config.K, size=count, p=np.asarray(config.mixing))
    x = np.zeros((count, config.n))
    lat_a = [None] * count
    lat_e = [None] * count
    for k in range(config.K):
        idx = np.flatnonzero(labels == k)
        if idx.size == 0:
            continue
        uk, utk = bases.u[k], bases.u_tilde[k]
        a = rng.standard_normal((idx.size, uk.shape[1]))
        e = rng.standard_normal((idx.size, utk.shape[1]))
        x[idx] = a @ uk.T + config.delta * (e @ utk.T) + config.mean(k)
        for row, i in enumerate(idx):
            lat_a[i] = a[row]
            lat_e[i] = e[row]
    return [
        Sample(x0=_freeze(x[i]), label=int(labels[i]), latents=(lat_a[i], lat_e[i]))
        for i in range(count)
    ]


def add_noise(x0: np.ndarray, sigma: float, seed=0) -> np.ndarray:
    """Forward corruption x0 + sigma * eps with eps ~ N(0, I)."""
    sigma = _check_sigma(sigma)
    rng = rng_from(seed, 2)
    x0 = np.asarray(x0, dtype=np.float64)
    return x0 + sigma * rng.standard_normal(x0.shape)


def well_separated_config(base: MolrgConfig, separation: float) -> MolrgConfig:
    """Copy of base with class means separation apart along fresh axes.

    Mean directions are the trailing canonical axes (one per class), which
    gen_bases keeps orthogonal to every class subspace; pairwise mean distance
    is separation * sqrt(2).  separation = 0 returns the base unchanged.
    """
    separation = float(separation)
    if separation < 0:
        raise LengthMismatch("separation must be >= 0")
    if separation == 0.0:
        return base
    if sum(base.dims) + base.K > base.n:
        raise DimensionOverflow("no room for mean directions outside the subspaces")
    eye = np.eye(base.n)
    means = tuple(separation * eye[:, base.n - 1 - k] for k in range(base.K))
    return replace(base, means=means)


def stack_samples(samples) -> tuple:
    """(count x n data matrix, int label vector) view of a sample list."""
    x = np.stack([s.x0 for s in samples])
    labels = np.array([s.label for s in samples], dtype=int)
    return x, labels


def config_to_dict(config: MolrgConfig) -> dict:
    out = {
        "n": config.n,
        "dims": list(config.dims),
        "delta": config.delta,
        "mixing": list(config.mixing),
        "overlap_angle": config.overlap_angle,
    }
    if config.means is not None:
        out["means"] = [list(map(float, m)) for m in config.means]
    return out


def config_from_dict(d: dict) -> MolrgConfig:
    means = d.get("means")
    return MolrgConfig(
        n=int(d["n"]),
        dims=tuple(d["dims"]),
        delta=float(d["delta"]),
        mixing=tuple(d["mixing"]) if d.get("mixing") is not None else None,
        overlap_angle=float(d.get("overlap_angle", 90.0)),
        means=tuple(np.asarray(m, dtype=np.float64) for m in means) if means else None,
    )


def save_dataset(path, samples, config: MolrgConfig, seed, bases: BasisSet = None):
    """Write samples as CSV plus a JSON sidecar with config/seed/bases."""
    path = Path(path)
    n = config.n
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label"] + [f"x_{i}" for i in range(n)])
        for s in samples:
            writer.writerow([s.label] + [repr(float(v)) for v in s.x0])
    sidecar = {"config": config_to_dict(config), "seed": seed}
    if bases is not None:
        sidecar["bases"] = {
            "u": [[list(map(float, row)) for row in b] for b in bases.u],
            "orthogonal": bases.orthogonal,
        }
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2))


def load_dataset(path) -> tuple:
    """Read a dataset CSV and its sidecar; latents are not recoverable."""
    path = Path(path)
    samples = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            samples.append(
                Sample(
                    x0=_freeze(np.array([float(v) for v in row[1:]])),
                    label=int(row[0]),
                )
            )
    sidecar = json.loads(path.with_suffix(".json").read_text())
    return samples, config_from_dict(sidecar["config"]), sidecar
