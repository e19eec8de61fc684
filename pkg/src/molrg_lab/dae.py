"""Trainable structured denoiser and its optimization loop.

The model is x_hat = U D(x, sigma) U^T x with U an orthonormal-column matrix
partitioned into K blocks.  D scales block l by beta_l = xi + (zeta - xi) w_l,
where w is the softmax of per-block gating logits

    g_l = phi * |U_l^T x|^2 + psi * |Utilde_l^T x|^2

and Utilde_l is the concatenation of the other learned blocks.  Training is
plain denoising regression: corrupt a clean sample at a random grid level,
regress the output onto the clean sample, take an adaptive-moment step on U,
then re-orthonormalize U by a thin QR retraction so the zeta/xi calibration
stays meaningful at every step.  Gradients flow through the gating softmax
unless explicitly frozen.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionOverflow, EmptyBatch, ShapeMismatch
from .molrg import BasisSet, _orthonormalize, rng_from, stack_samples
from .schedule import NoiseSchedule, _check_delta, _check_sigma


@dataclass(frozen=True)
class DaeParams:
    """Learnable orthonormal dictionary, partitioned into per-class blocks."""

    u: np.ndarray
    dims: tuple
    delta: float = None  # calibration the params were trained for (bookkeeping)

    @property
    def K(self) -> int:
        return len(self.dims)

    @property
    def block_starts(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.dims)[:-1]]).astype(int)


@dataclass(frozen=True)
class DaeOutput:
    h: np.ndarray
    x_hat: np.ndarray
    w: np.ndarray
    beta: np.ndarray


@dataclass
class TrainOptions:
    epochs: int = 200
    lr: float = 5e-4
    batch_size: int = 128
    optimizer: str = "adam"
    seed: int = 0
    freeze_gating: bool = False
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    # Epochs after which a column-reassignment pass runs; None picks the
    # halfway and three-quarter marks.  Block membership of a column is a
    # combinatorial choice, so gradient steps alone can leave sharply learned
    # directions parked in the wrong block; greedy loss-decreasing column
    # swaps between blocks escape those assignment equilibria.
    reassign_epochs: tuple = None
    # Re-orthonormalize U after every step (the calibrated regime).  Turning
    # this off lets U drift freely, which overlapping-class data rewards: the
    # constrained family cannot damp the shared low-variance directions, a
    # free dictionary can.
    retract: bool = True


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)  # (epoch, loss, subspace_distance)

    def to_csv(self, path):
        lines = ["epoch,loss,subspace_distance"]
        for epoch, loss, dist in self.rows:
            lines.append(f"{epoch},{float(loss)!r},{'' if dist is None else repr(float(dist))}")
        Path(path).write_text("\n".join(lines) + "\n")


def init_params(n: int, K: int, d: int, seed=0, dims=None) -> DaeParams:
    """Orthonormalized Gaussian initialization; dims overrides K blocks of d."""
    dims = tuple(dims) if dims is not None else tuple([int(d)] * int(K))
    total = sum(dims)
    if total > n:
        raise DimensionOverflow(f"{total} columns do not fit in dimension {n}")
    g = rng_from(seed, 3).standard_normal((n, total))
    return DaeParams(u=_orthonormalize(g), dims=dims)


def params_from_bases(bases: BasisSet, delta: float = None) -> DaeParams:
    """Ground-truth parameters (orthogonal configurations only)."""
    if not bases.orthogonal:
        raise ShapeMismatch("ground-truth params need orthogonal class bases")
    u = bases.stacked()
    return DaeParams(u=u, dims=tuple(b.shape[1] for b in bases.u), delta=delta)


def _level_coeffs(sigma, delta):
    """zeta, xi, phi, psi for scalar or per-sample sigma (column-broadcast)."""
    s2 = np.asarray(sigma, dtype=np.float64) ** 2
    if s2.ndim == 1:
        s2 = s2[:, None]
    d2 = delta * delta
    zeta = 1.0 / (1.0 + s2)
    xi = d2 / (d2 + s2)
    return zeta, xi, zeta / (2.0 * s2), xi / (2.0 * s2)


def _forward_core(params: DaeParams, x: np.ndarray, sigma, delta: float):
    """Batch forward pass; sigma may be scalar or one level per row."""
    starts = params.block_starts
    zeta, xi, phi, psi = _level_coeffs(sigma, delta)
    z = x @ params.u
    e = np.add.reduceat(z * z, starts, axis=1)
    s = e.sum(axis=1, keepdims=True)
    g = phi * e + psi * (s - e)
    shifted = g - g.max(axis=1, keepdims=True)
    expg = np.exp(shifted)
    w = expg / expg.sum(axis=1, keepdims=True)
    beta = xi + (zeta - xi) * w
    b = np.repeat(beta, params.dims, axis=1)
    h = b * z
    x_hat = h @ params.u.T
    return z, e, w, beta, b, h, x_hat


def forward(params: DaeParams, x_t: np.ndarray, sigma: float, delta: float) -> DaeOutput:
    """Latent feature, gating weights, block scales and reconstruction."""
    sigma = _check_sigma(sigma)
    delta = _check_delta(delta)
    x_t = np.asarray(x_t, dtype=np.float64)
    single = x_t.ndim == 1
    xb = x_t[None, :] if single else x_t
    _, _, w, beta, _, h, x_hat = _forward_core(params, xb, sigma, delta)
    if single:
        return DaeOutput(h=h[0], x_hat=x_hat[0], w=w[0], beta=beta[0])
    return DaeOutput(h=h, x_hat=x_hat, w=w, beta=beta)


def denoise(params: DaeParams, x: np.ndarray, sigma: float, delta: float) -> np.ndarray:
    """Reconstruction only, for use as a denoiser callable."""
    return forward(params, x, sigma, delta).x_hat


def _loss_and_grad_batch(params, x, y, sigma, delta, lam, freeze_gating=False):
    """Mean of lam_i * |x_hat_i - y_i|^2 over the batch and its U-gradient.

    The gradient has three parts: the two direct paths of U through
    U diag(b) U^T, and the gating path through the block energies; the psi
    contribution cancels inside the softmax so only (phi - psi) survives.
    """
    m = x.shape[0]
    starts = params.block_starts
    zeta, xi, phi, psi = _level_coeffs(sigma, delta)
    z, e, w, beta, b, h, x_hat = _forward_core(params, x, sigma, delta)
    r = x_hat - y
    per = np.einsum("ij,ij->i", r, r)
    loss = float(np.mean(lam * per))
    wgt = (lam / m)[:, None]
    ru = r @ params.u
    grad = 2.0 * (wgt * r).T @ h + 2.0 * x.T @ (wgt * b * ru)
    if not freeze_gating:
        c = (zeta - xi) * np.add.reduceat(ru * z, starts, axis=1)
        cbar = np.sum(w * c, axis=1, keepdims=True)
        coef = 4.0 * (phi - psi) * w * (c - cbar) * wgt
        grad += x.T @ (np.repeat(coef, params.dims, axis=1) * z)
    return loss, grad


def dsm_loss(
    params: DaeParams,
    batch,
    schedule: NoiseSchedule,
    delta: float,
    mc_draws: int = 1,
    seed=0,
) -> float:
    """Denoising loss: mean over samples of the weighted sum over levels of
    the mean squared reconstruction error under fresh noise draws.

    Noise draws depend only on (seed, level, draw), so the loss is a smooth
    deterministic function of the parameters for a fixed seed.
    """
    return _dsm_loss_impl(params, batch, schedule, delta, mc_draws, seed)[0]


def dsm_loss_grad(
    params: DaeParams,
    batch,
    schedule: NoiseSchedule,
    delta: float,
    mc_draws: int = 1,
    seed=0,
    freeze_gating: bool = False,
):
    """(loss, gradient) under the exact same draws as dsm_loss."""
    return _dsm_loss_impl(params, batch, schedule, delta, mc_draws, seed, True, freeze_gating)


def _dsm_loss_impl(params, batch, schedule, delta, mc_draws, seed, want_grad=False, freeze_gating=False):
    if len(batch) == 0:
        raise EmptyBatch("dsm_loss needs at least one sample")
    delta = _check_delta(delta)
    if mc_draws < 1:
        raise EmptyBatch("mc_draws must be >= 1")
    x0, _ = stack_samples(batch)
    m, n = x0.shape
    total_loss = 0.0
    grad = np.zeros_like(params.u) if want_grad else None
    for t, sig in enumerate(schedule.sigmas):
        lam = np.full(m, schedule.weights[t])
        for j in range(mc_draws):
            eps = rng_from(seed, 4, t, j).standard_normal((m, n))
            xt = x0 + sig * eps
            if want_grad:
                loss_tj, grad_tj = _loss_and_grad_batch(
                    params, xt, x0, float(sig), delta, lam / mc_draws, freeze_gating
                )
                grad += grad_tj
            else:
                loss_tj = _batch_loss_only(params, xt, x0, float(sig), delta, lam / mc_draws)
            total_loss += loss_tj
    return total_loss, grad


def _batch_loss_only(params, x, y, sigma, delta, lam):
    *_, x_hat = _forward_core(params, x, sigma, delta)
    per = np.einsum("ij,ij->i", x_hat - y, x_hat - y)
    return float(np.mean(lam * per))


def _reassignment_pass(u, dims, x_eval, sigmas, eps_draws, delta):
    """Greedy cross-block column swaps that lower a fixed denoising loss.

    The swap keeps U orthonormal exactly and only changes which block each
    column feeds, i.e. the discrete part of the parameterization.  Sweeps
    repeat until no pairwise swap improves the loss.
    """
    total = u.shape[1]
    block_of = np.repeat(np.arange(len(dims)), dims)
    lam = np.ones(x_eval.shape[0])

    def loss_of(candidate):
        cur = DaeParams(u=candidate, dims=tuple(dims), delta=delta)
        val = 0.0
        for sig, eps in zip(sigmas, eps_draws):
            val += _batch_loss_only(cur, x_eval + sig * eps, x_eval, float(sig), delta, lam)
        return val

    base = loss_of(u)
    improved = True
    while improved:
        improved = False
        for i in range(total):
            for j in range(i + 1, total):
                if block_of[i] == block_of[j]:
                    continue
                cand = u.copy()
                cand[:, [i, j]] = cand[:, [j, i]]
                val = loss_of(cand)
                if val < base - 1e-12:
                    u, base = cand, val
                    improved = True
    return u


def train(
    params: DaeParams,
    dataset,
    schedule: NoiseSchedule,
    delta: float,
    opts: TrainOptions = None,
    bases: BasisSet = None,
):
    """Mini-batch training with per-sample random levels and QR retraction.

    Each sample in a batch draws its own level uniformly from the grid and a
    fresh noise vector.  Column-reassignment passes run at the configured
    epochs (see TrainOptions.reassign_epochs).  Non-convergence is reported
    through the returned log, never raised.  When bases are given, the
    per-epoch log also records the span distance to them.
    """
    if len(dataset) == 0:
        raise EmptyBatch("training needs a non-empty dataset")
    opts = opts or TrainOptions()
    delta = _check_delta(delta)
    x0, _ = stack_samples(dataset)
    m, n = x0.shape
    levels = len(schedule)
    rng = rng_from(opts.seed, 5)
    u = params.u.copy()
    adam_m = np.zeros_like(u)
    adam_v = np.zeros_like(u)
    b1, b2 = opts.adam_betas
    step = 0
    log = TrainLog()

    reassign_at = opts.reassign_epochs
    if reassign_at is None:
        reassign_at = (opts.epochs // 2, (3 * opts.epochs) // 4) if opts.epochs >= 8 else ()
    reassign_at = set(reassign_at)
    eval_rng = rng_from(opts.seed, 10)
    eval_idx = eval_rng.choice(m, size=min(m, 2048), replace=False)
    x_eval = x0[eval_idx]
    lvl_idx = np.unique(np.linspace(0, levels - 1, min(levels, 8)).astype(int))
    eval_sigmas = schedule.sigmas[lvl_idx]
    eval_eps = [eval_rng.standard_normal(x_eval.shape) for _ in lvl_idx]

    for epoch in range(opts.epochs):
        order = rng.permutation(m)
        epoch_loss = 0.0
        batches = 0
        for lo in range(0, m, opts.batch_size):
            idx = order[lo : lo + opts.batch_size]
            xb = x0[idx]
            t = rng.integers(levels, size=idx.size)
            sig = schedule.sigmas[t]
            lam = schedule.weights[t]
            eps = rng.standard_normal(xb.shape)
            cur = DaeParams(u=u, dims=params.dims, delta=delta)
            loss, grad = _loss_and_grad_batch(
                cur, xb + sig[:, None] * eps, xb, sig, delta, lam, opts.freeze_gating
            )
            step += 1
            if opts.optimizer == "adam":
                adam_m = b1 * adam_m + (1 - b1) * grad
                adam_v = b2 * adam_v + (1 - b2) * grad * grad
                mhat = adam_m / (1 - b1**step)
                vhat = adam_v / (1 - b2**step)
                u = u - opts.lr * mhat / (np.sqrt(vhat) + opts.adam_eps)
            else:
                u = u - opts.lr * grad
            if opts.retract:
                u = _orthonormalize(u)
            epoch_loss += loss
            batches += 1
        if epoch + 1 in reassign_at and len(params.dims) > 1:
            u = _reassignment_pass(u, params.dims, x_eval, eval_sigmas, eval_eps, delta)
        dist = None
        if bases is not None:
            dist = subspace_distance(
                DaeParams(u=u, dims=params.dims, delta=delta), bases
            ).distance
        log.rows.append((epoch, epoch_loss / batches, dist))
    return DaeParams(u=u, dims=params.dims, delta=delta), log


@dataclass(frozen=True)
class SubspaceReport:
    distance: float
    assignment: tuple  # assignment[l] = class index matched to learned block l
    pair_angles_deg: tuple  # mean principal angle of each matched pair
    mean_principal_angle_deg: float


def subspace_distance(params: DaeParams, bases: BasisSet) -> SubspaceReport:
    """Normalized projector distance between the learned span and the union of
    the class subspaces, plus the best block-to-class matching.

    distance = |P_learned - P_truth|_F / sqrt(T_learned + T_truth), which is 0
    for equal spans (any block permutation) and 1 for orthogonal spans.  The
    matching maximizes the summed principal cosines over all K! pairings.
    """
    truth = bases.stacked()
    n = truth.shape[0]
    if params.u.shape[0] != n:
        raise ShapeMismatch(
            f"ambient dims differ: params {params.u.shape[0]} vs bases {n}"
        )
    if params.K != bases.K:
        raise ShapeMismatch(f"block count {params.K} != class count {bases.K}")
    t_learn = params.u.shape[1]
    t_truth = truth.shape[1]
    cross = params.u.T @ truth
    sq = max(t_learn + t_truth - 2.0 * float(np.sum(cross * cross)), 0.0)
    distance = float(np.sqrt(sq) / np.sqrt(t_learn + t_truth))

    blocks = np.split(params.u, np.cumsum(params.dims)[:-1], axis=1)
    k = params.K
    svals = [[np.linalg.svd(bases.u[c].T @ blocks[l], compute_uv=False) for c in range(k)] for l in range(k)]
    best, best_perm = -np.inf, None
    for perm in itertools.permutations(range(k)):
        score = sum(float(np.sum(svals[l][perm[l]])) for l in range(k))
        if score > best:
            best, best_perm = score, perm
    angles = tuple(
        float(np.mean(np.degrees(np.arccos(np.clip(svals[l][best_perm[l]], -1.0, 1.0)))))
        for l in range(k)
    )
    return SubspaceReport(
        distance=distance,
        assignment=best_perm,
        pair_angles_deg=angles,
        mean_principal_angle_deg=float(np.mean(angles)),
    )


def save_checkpoint(path, params: DaeParams, meta: dict = None):
    """Single-file checkpoint: one JSON header line, then the row-major
    little-endian float64 payload of U."""
    header = {
        "shape": list(params.u.shape),
        "dims": list(params.dims),
        "delta": params.delta,
        "meta": meta or {},
    }
    with Path(path).open("wb") as fh:
        fh.write(json.dumps(header).encode("utf-8") + b"\n")
        fh.write(np.ascontiguousarray(params.u, dtype="<f8").tobytes())


def load_checkpoint(path):
    with Path(path).open("rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        payload = fh.read()
    shape = tuple(header["shape"])
    u = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
    params = DaeParams(u=u, dims=tuple(header["dims"]), delta=header["delta"])
    return params, header["meta"]
