"""Downstream evaluation of latent representations.

Features are the gated projections produced by a structured denoiser at one
noise level.  Quality is measured by a multinomial linear probe trained with
full-batch gradient descent, by a per-class projection-energy classifier, and
by a soft-voting ensemble that averages probe logits across neighboring
levels.  Ties always break toward the lowest class index.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dae import DaeParams, forward, params_from_bases
from .errors import (
    LevelMismatch,
    RankTooLarge,
    SampleMisalignment,
    ShapeMismatch,
    SingleClassBatch,
)
from .molrg import BasisSet, rng_from, stack_samples
from .schedule import _check_sigma


@dataclass(frozen=True)
class FeatureBatch:
    h: np.ndarray  # count x feature-dim
    labels: np.ndarray
    sigma: float
    source: str = "trained-dae"  # or "analytic-optimal", "clean-input"


@dataclass
class ProbeModel:
    weights: np.ndarray  # K x feature-dim
    bias: np.ndarray  # K
    sigma: float
    final_loss: float = None
    trained: bool = False


@dataclass
class ProbeOptions:
    epochs: int = 500
    lr: float = 0.1
    l2: float = 1e-4
    seed: int = 0


@dataclass
class ProbeCurve:
    """(sigma, train accuracy, test accuracy) series."""

    points: list  # [(sigma, acc_train, acc_test), ...]
    probe_kind: str = "logistic"
    seed: int = 0

    @property
    def sigmas(self):
        return [p[0] for p in self.points]

    @property
    def values(self):
        return [p[2] for p in self.points]

    def to_csv(self, path):
        lines = ["sigma,acc_train,acc_test,probe_kind,seed"]
        for sig, tr, te in self.points:
            lines.append(f"{float(sig)!r},{float(tr)!r},{float(te)!r},{self.probe_kind},{self.seed}")
        Path(path).write_text("\n".join(lines) + "\n")


def extract_features(
    model, dataset, sigma: float, noising: str = "noisy", seed=0, delta: float = None
) -> FeatureBatch:
    """Latent features of a dataset at one level.

    model is either trained DaeParams or a BasisSet (the analytic optimum).
    noising="noisy" corrupts each sample with fresh level-sigma noise before
    the forward pass; "clean" feeds the clean samples at the same level.
    """
    sigma = _check_sigma(sigma)
    if isinstance(model, BasisSet):
        params = params_from_bases(model, delta)
        source = "analytic-optimal"
    else:
        params = model
        source = "trained-dae"
    if delta is None:
        delta = params.delta
    x0, labels = stack_samples(dataset)
    if noising == "noisy":
        x_in = x0 + sigma * rng_from(seed, 7).standard_normal(x0.shape)
    elif noising == "clean":
        x_in = x0
        source = "clean-input"
    else:
        raise ShapeMismatch(f"noising must be 'noisy' or 'clean', got {noising!r}")
    out = forward(params, x_in, sigma, delta)
    return FeatureBatch(h=out.h, labels=labels, sigma=sigma, source=source)


def _softmax_rows(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def train_probe(features: FeatureBatch, opts: ProbeOptions = None) -> ProbeModel:
    """Multinomial logistic regression by full-batch gradient descent on
    cross-entropy with optional L2 on the weights."""
    opts = opts or ProbeOptions()
    h = np.asarray(features.h, dtype=np.float64)
    labels = np.asarray(features.labels)
    if np.unique(labels).size < 2:
        raise SingleClassBatch("probe training needs at least two classes")
    m, dim = h.shape
    k = int(labels.max()) + 1
    onehot = np.zeros((m, k))
    onehot[np.arange(m), labels] = 1.0
    w = 0.01 * rng_from(opts.seed, 8).standard_normal((k, dim))
    b = np.zeros(k)
    loss = np.inf
    for _ in range(opts.epochs):
        logits = h @ w.T + b
        p = _softmax_rows(logits)
        loss = float(
            -np.mean(np.log(np.maximum(p[np.arange(m), labels], 1e-300)))
            + 0.5 * opts.l2 * np.sum(w * w)
        )
        diff = p - onehot
        w -= opts.lr * (diff.T @ h / m + opts.l2 * w)
        b -= opts.lr * diff.mean(axis=0)
    return ProbeModel(
        weights=w, bias=b, sigma=features.sigma, final_loss=loss, trained=True
    )


def probe_logits(model: ProbeModel, features: FeatureBatch) -> np.ndarray:
    if features.h.shape[1] != model.weights.shape[1]:
        raise ShapeMismatch("feature dim does not match probe dim")
    return features.h @ model.weights.T + model.bias


def eval_probe(model: ProbeModel, features: FeatureBatch) -> float:
    """Fraction of argmax-correct predictions."""
    if features.h.shape[1] != model.weights.shape[1]:
        raise ShapeMismatch(
            f"feature dim {features.h.shape[1]} != probe dim {model.weights.shape[1]}"
        )
    logits = features.h @ model.weights.T + model.bias
    pred = np.argmax(logits, axis=1)
    return float(np.mean(pred == features.labels))


def projection_classify(
    features: FeatureBatch, train_features: FeatureBatch, rank: int
) -> float:
    """Accuracy of the projection-energy classifier.

    Each class basis V_k holds the top-rank right singular vectors of that
    class's training features; a sample is assigned to the class whose basis
    captures the most energy |V_k^T h|^2.
    """
    classes = np.unique(train_features.labels)
    dim = train_features.h.shape[1]
    if rank < 1 or rank > dim:
        raise RankTooLarge(f"rank {rank} not in [1, {dim}]")
    vs = {}
    for k in classes:
        hk = train_features.h[train_features.labels == k]
        if hk.shape[0] < rank:
            raise RankTooLarge(f"class {k} has {hk.shape[0]} train samples < rank {rank}")
        _, _, vh = np.linalg.svd(hk, full_matrices=False)
        vs[int(k)] = vh[:rank].T
    energies = np.full((features.h.shape[0], int(classes.max()) + 1), -np.inf)
    for k, v in vs.items():
        z = features.h @ v
        energies[:, k] = np.einsum("ij,ij->i", z, z)
    pred = np.argmax(energies, axis=1)
    return float(np.mean(pred == features.labels))


def ensemble_predict(models, feature_batches) -> float:
    """Soft-voting accuracy: average the probe logits across levels, then argmax.

    All batches must describe the same evaluation samples (identical labels in
    identical order); each batch's noise draw is independent per level.
    """
    if len(models) != len(feature_batches) or len(models) == 0:
        raise LevelMismatch("need one model per feature batch")
    ref = feature_batches[0]
    for model, batch in zip(models, feature_batches):
        if not model.trained:
            raise LevelMismatch("all ensemble members must be trained")
        if abs(model.sigma - batch.sigma) > 1e-12:
            raise LevelMismatch(
                f"model level {model.sigma} != feature level {batch.sigma}"
            )
        if batch.h.shape[0] != ref.h.shape[0] or not np.array_equal(
            batch.labels, ref.labels
        ):
            raise SampleMisalignment("feature batches must share evaluation samples")
    logits = np.zeros((ref.h.shape[0], models[0].weights.shape[0]))
    for model, batch in zip(models, feature_batches):
        if batch.h.shape[1] != model.weights.shape[1]:
            raise ShapeMismatch("feature dim does not match probe dim")
        logits += batch.h @ model.weights.T + model.bias
    pred = np.argmax(logits / len(models), axis=1)
    return float(np.mean(pred == ref.labels))


def label_noise(labels, fraction: float, K: int, seed=0) -> np.ndarray:
    """Reassign a uniformly chosen floor(fraction * count) subset of labels to
    uniformly random different classes."""
    if not (0.0 <= fraction < 1.0):
        raise ShapeMismatch(f"fraction must be in [0, 1), got {fraction}")
    labels = np.asarray(labels).copy()
    count = labels.size
    flip = int(np.floor(fraction * count))
    if flip == 0:
        return labels
    rng = rng_from(seed, 9)
    idx = rng.choice(count, size=flip, replace=False)
    offsets = rng.integers(1, K, size=flip)
    labels[idx] = (labels[idx] + offsets) % K
    return labels
