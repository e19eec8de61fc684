"""Named end-to-end experiment pipelines.

Each experiment resolves a fully-defaulted specification, runs data
generation, optional training, and a metric sweep, then serializes curve and
table CSVs, matplotlib figures, and a meta JSON holding every resolved value
so the run can be reproduced bit for bit from the meta alone.
"""

from __future__ import annotations

import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, analytic, dae, figures, metrics, probe, svgplot
from .errors import InvalidSpec, UnknownExperiment, WrongClassCount
from .molrg import (
    BasisSet,
    MolrgConfig,
    config_from_dict,
    config_to_dict,
    gen_bases,
    rng_from,
    sample_dataset,
    stack_samples,
    well_separated_config,
)
from .schedule import make_explicit_schedule, schedule_from_json

GRID_9 = [0.002, 0.008, 0.023, 0.060, 0.140, 0.296, 0.585, 1.088, 1.923]
GRID_8 = GRID_9[1:]
GRID_WELL_SEP = [0.030, 0.053, 0.098, 0.189, 0.282, 0.379, 0.480, 0.588,
                 0.704, 0.830, 0.989, 1.492]
DDPM_EVAL_TIMESTEPS = [5, 10, 20, 40, 60, 80, 100, 120, 140, 160, 180, 240, 260, 280]
FIG12_TIMESTEPS = [5, 20, 60, 120, 260]

EXPERIMENT_NAMES = (
    "fig3",
    "fig4",
    "fig11-grid",
    "fig12-dump",
    "table4",
    "table5",
    "table6",
    "table7",
    "clean-input-snr",
    "weight-sharing",
    "ensemble-noise",
)


def resolve_threads(requested=None) -> int:
    if requested:
        return max(1, int(requested))
    env = os.environ.get("MOLRG_LAB_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def parallel_map(fn, items, threads: int):
    """Ordered map, threaded when threads > 1 (results keep item order)."""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=min(threads, len(items))) as pool:
        return list(pool.map(fn, items))


def write_rows_csv(path, header, rows):
    lines = [",".join(header)]
    for row in rows:
        lines.append(
            ",".join(
                repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)
                for v in row
            )
        )
    Path(path).write_text("\n".join(lines) + "\n")
    return str(path)


@dataclass
class ExperimentSpec:
    """Fully resolved description of one experiment run."""

    name: str
    config: MolrgConfig
    schedule: dict  # JSON schedule descriptor used for training
    train: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)
    sizes: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)
    out_dir: str = "results"
    threads: int = 1

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "config": config_to_dict(self.config),
            "schedule": self.schedule,
            "train": self.train,
            "seeds": self.seeds,
            "sizes": self.sizes,
            "extra": self.extra,
            "out_dir": self.out_dir,
            "threads": self.threads,
        }

    @staticmethod
    def from_dict(d: dict) -> "ExperimentSpec":
        if "spec" in d and "name" not in d:  # a meta JSON from a previous run
            d = d["spec"]
        unknown = set(d) - {
            "name", "config", "schedule", "train", "seeds", "sizes", "extra",
            "out_dir", "threads",
        }
        if unknown:
            raise InvalidSpec(f"unknown spec fields: {sorted(unknown)}")
        return ExperimentSpec(
            name=d["name"],
            config=config_from_dict(d["config"]),
            schedule=d["schedule"],
            train=dict(d.get("train", {})),
            seeds=dict(d.get("seeds", {})),
            sizes=dict(d.get("sizes", {})),
            extra=dict(d.get("extra", {})),
            out_dir=d.get("out_dir", "results"),
            threads=int(d.get("threads", 1)),
        )


@dataclass
class ResultBundle:
    curves: list = field(default_factory=list)
    tables: list = field(default_factory=list)
    figures: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)


DDPM_500 = {"kind": "ddpm", "T": 500, "beta_min": 1e-4, "beta_max": 0.02}


def default_spec(name: str, out_dir="results", seed=0, threads=None) -> ExperimentSpec:
    """Registry of per-experiment default parameters."""
    if name not in EXPERIMENT_NAMES:
        raise UnknownExperiment(f"{name!r} is not one of {EXPERIMENT_NAMES}")
    threads = resolve_threads(threads)
    seeds = {"base": int(seed)}
    train = {"epochs": 200, "lr": 5e-4, "batch_size": 128, "retract": True}
    if name == "fig3":
        return ExperimentSpec(
            name, MolrgConfig(n=50, dims=(5, 5, 5), delta=0.2), DDPM_500,
            train=train, seeds=seeds,
            sizes={"train_count": 12000, "test_count": 9000, "eval_sets": 5, "mc_draws": 2},
            extra={"eval_timesteps": DDPM_EVAL_TIMESTEPS},
            out_dir=out_dir, threads=threads,
        )
    if name == "fig4":
        return ExperimentSpec(
            name, MolrgConfig(n=50, dims=(5, 5, 5), delta=0.2),
            {"kind": "explicit", "sigmas": GRID_9},
            seeds=seeds, out_dir=out_dir, threads=threads,
        )
    if name == "fig11-grid":
        return ExperimentSpec(
            name, MolrgConfig(n=100, dims=(5,) * 10, delta=0.3),
            {"kind": "explicit", "sigmas": GRID_9},
            seeds=seeds,
            sizes={"count": 2400, "mc_draws": 8},
            extra={"vary_K": [4, 6, 8], "vary_d": [2, 8], "vary_delta": [0.1, 0.5]},
            out_dir=out_dir, threads=threads,
        )
    if name == "fig12-dump":
        return ExperimentSpec(
            name, MolrgConfig(n=50, dims=(5, 5, 5), delta=0.2), DDPM_500,
            seeds=seeds, sizes={"count": 2400},
            extra={"timesteps": FIG12_TIMESTEPS},
            out_dir=out_dir, threads=threads,
        )
    if name == "table4":
        return ExperimentSpec(
            name, MolrgConfig(n=50, dims=(5, 5), delta=0.2), DDPM_500,
            train=train, seeds=seeds,
            sizes={"train_count": 30000, "eval_count": 6000, "mc_draws": 2, "n_seeds": 3},
            extra={"grid": GRID_8, "overlap_angle": 30.0,
                   # free (non-retracted) training for the overlapping arm:
                   # the orthonormal family cannot keep the shared
                   # low-variance directions damped, a drifted one can
                   "overlap_retract": False},
            out_dir=out_dir, threads=threads,
        )
    if name == "table5":
        return ExperimentSpec(
            name, MolrgConfig(n=50, dims=(10, 2), delta=0.2), DDPM_500,
            train=train, seeds=seeds,
            sizes={"train_count": 30000, "eval_count": 6000, "mc_draws": 2},
            extra={"grid": GRID_9},
            out_dir=out_dir, threads=threads,
        )
    if name == "table6":
        return ExperimentSpec(
            name, MolrgConfig(n=50, dims=(5, 5), delta=0.2, mixing=(0.8, 0.2)), DDPM_500,
            train=train, seeds=seeds,
            sizes={"train_count": 30000, "eval_count": 6000, "mc_draws": 2},
            extra={"grid": GRID_9},
            out_dir=out_dir, threads=threads,
        )
    if name == "table7":
        return ExperimentSpec(
            name, MolrgConfig(n=50, dims=(5, 5), delta=0.2), DDPM_500,
            train=train, seeds=seeds,
            sizes={"train_count": 30000, "test_count": 9000, "mc_draws": 2},
            extra={"grid": GRID_WELL_SEP, "separation": 3.0},
            out_dir=out_dir, threads=threads,
        )
    if name == "clean-input-snr":
        return ExperimentSpec(
            name, MolrgConfig(n=50, dims=(5, 5, 5), delta=0.2),
            {"kind": "explicit", "sigmas": GRID_9},
            seeds=seeds, sizes={"count": 6000},
            out_dir=out_dir, threads=threads,
        )
    if name == "weight-sharing":
        # separated clusters keep the probes informative so smoothness across
        # levels is measurable
        cfg = well_separated_config(MolrgConfig(n=30, dims=(3, 3), delta=0.2), 1.5)
        return ExperimentSpec(
            name, cfg,
            {"kind": "explicit", "sigmas": [0.023, 0.060, 0.140, 0.296, 0.585, 1.088]},
            train={"epochs_per_level": 15, "lr": 5e-4, "batch_size": 128, "retract": True},
            seeds=seeds,
            sizes={"train_count": 4000, "test_count": 3000, "n_seeds": 3},
            out_dir=out_dir, threads=threads,
        )
    if name == "ensemble-noise":
        # mildly separated clusters give probes in the informative accuracy
        # range where soft voting has something to average
        cfg = well_separated_config(MolrgConfig(n=50, dims=(5, 5, 5), delta=0.2), 1.5)
        return ExperimentSpec(
            name, cfg, {"kind": "explicit", "sigmas": GRID_9},
            train={"epochs": 100, "lr": 5e-4, "batch_size": 128, "retract": True},
            seeds=seeds,
            sizes={"train_count": 6000, "test_count": 3000, "n_seeds": 5},
            extra={"center_index": 5, "window": 2, "label_noise": 0.2,
                   "features": "trained"},
            out_dir=out_dir, threads=threads,
        )
    raise UnknownExperiment(name)


def run(spec: ExperimentSpec) -> ResultBundle:
    """Execute the named pipeline; flush a failure marker on mid-run error."""
    if spec.name not in EXPERIMENT_NAMES:
        raise UnknownExperiment(f"{spec.name!r} is not one of {EXPERIMENT_NAMES}")
    out = Path(spec.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    try:
        bundle = _RUNNERS[spec.name](spec, out)
    except Exception as exc:
        meta = {
            "spec": spec.to_dict(),
            "version": __version__,
            "status": "failed",
            "error": f"{type(exc).__name__}: {exc}",
            "wall_time_s": time.time() - t0,
        }
        (out / "meta.json").write_text(json.dumps(meta, indent=2))
        raise
    bundle.meta = {
        "spec": spec.to_dict(),
        "version": __version__,
        "status": "ok",
        "wall_time_s": time.time() - t0,
        **bundle.meta,
    }
    (out / "meta.json").write_text(json.dumps(bundle.meta, indent=2))
    return bundle


def _base_seed(spec) -> int:
    return int(spec.seeds.get("base", 0))


def _train_opts(spec, **overrides) -> dae.TrainOptions:
    t = {**spec.train, **overrides}
    return dae.TrainOptions(
        epochs=int(t.get("epochs", 200)),
        lr=float(t.get("lr", 5e-4)),
        batch_size=int(t.get("batch_size", 128)),
        seed=t.get("seed", 0),
        retract=bool(t.get("retract", True)),
        freeze_gating=bool(t.get("freeze_gating", False)),
    )


def _probe_snr_sweep(spec, params, cfg, bases, train_data, test_sets, sigmas):
    """Probe accuracy and trained-model SNR per level, averaged over test sets."""
    mc = int(spec.sizes.get("mc_draws", 2))
    base = _base_seed(spec)
    denoiser = metrics.dae_denoiser(params, cfg.delta)

    def one_level(args):
        li, sig = args
        feats = probe.extract_features(params, train_data, sig, "noisy", seed=(base, 20, li))
        model = probe.train_probe(feats)
        acc_train = probe.eval_probe(model, feats)
        accs, snrs = [], []
        for i, ts in enumerate(test_sets):
            f = probe.extract_features(params, ts, sig, "noisy", seed=(base, 21, li, i))
            accs.append(probe.eval_probe(model, f))
            snrs.append(
                metrics.snr_empirical(denoiser, ts, bases, sig, mc_draws=mc, seed=(base, 22, li, i))
            )
        return acc_train, float(np.mean(accs)), float(np.mean(snrs))

    results = parallel_map(one_level, list(enumerate(map(float, sigmas))), spec.threads)
    probe_curve = probe.ProbeCurve(
        points=[(float(s), r[0], r[1]) for s, r in zip(sigmas, results)], seed=base
    )
    snr_curve = metrics.SnrCurve(
        points=[(float(s), r[2]) for s, r in zip(sigmas, results)],
        estimator="empirical-dae",
        meta=_curve_meta(cfg, base),
    )
    return probe_curve, snr_curve


def _curve_meta(cfg, seed):
    d = cfg.dims[0] if len(set(cfg.dims)) == 1 else list(cfg.dims)
    return {"n": cfg.n, "d": d, "K": cfg.K, "delta": cfg.delta, "seed": seed}


# ----------------------------------------------------------------- fig3


def _run_fig3(spec, out):
    cfg = spec.config
    base = _base_seed(spec)
    bases = gen_bases(cfg, seed=(base, 0))
    train_data = sample_dataset(cfg, bases, int(spec.sizes["train_count"]), seed=(base, 1))
    sched = schedule_from_json(spec.schedule)
    eval_sched = sched.subset([t - 1 for t in spec.extra["eval_timesteps"]])

    p0 = dae.init_params(cfg.n, cfg.K, cfg.dims[0], seed=(base, 2))
    opts = _train_opts(spec)
    opts.seed = (base, 3)
    params, log = dae.train(p0, train_data, sched, cfg.delta, opts, bases=bases)

    test_sets = [
        sample_dataset(cfg, bases, int(spec.sizes["test_count"]), seed=(base, 10, i))
        for i in range(int(spec.sizes["eval_sets"]))
    ]
    probe_curve, snr_curve = _probe_snr_sweep(
        spec, params, cfg, bases, train_data, test_sets, eval_sched.sigmas
    )
    closed = metrics.SnrCurve(
        points=[
            (float(s), metrics.snr_closed_form(float(s), cfg.delta, cfg.dims[0], cfg.K))
            for s in eval_sched.sigmas
        ],
        estimator="closed-form",
        meta=_curve_meta(cfg, base),
    )

    probe_csv = out / "fig3_probe.csv"
    snr_csv = out / "fig3_snr_dae.csv"
    closed_csv = out / "fig3_snr_closed.csv"
    probe_curve.to_csv(probe_csv)
    snr_curve.to_csv(snr_csv)
    closed.to_csv(closed_csv)
    log.to_csv(out / "fig3_training_log.csv")
    dae.save_checkpoint(out / "fig3_params.ckpt", params, {"spec": spec.to_dict()})

    rep = dae.subspace_distance(params, bases)
    figures.save_twin_curves(
        list(eval_sched.sigmas), probe_curve.values, snr_curve.values,
        out / "fig3.png", title="probe accuracy and SNR across noise levels",
    )
    svgplot.plot_curves([snr_csv, closed_csv], out / "fig3_snr.svg", ylabel="SNR")
    ua = metrics.unimodality_index(probe_curve)
    us = metrics.unimodality_index(snr_curve)
    return ResultBundle(
        curves=[str(probe_csv), str(snr_csv), str(closed_csv)],
        tables=[str(out / "fig3_training_log.csv")],
        figures=[str(out / "fig3.png"), str(out / "fig3_snr.svg")],
        meta={
            "subspace_distance": rep.distance,
            "mean_principal_angle_deg": rep.mean_principal_angle_deg,
            "probe_unimodality": vars(ua) | {"interior_peak": bool(ua.interior_peak)},
            "snr_unimodality": vars(us) | {"interior_peak": bool(us.interior_peak)},
        },
    )


# ----------------------------------------------------------------- fig4


def _run_fig4(spec, out):
    cfg = spec.config
    sched = schedule_from_json(spec.schedule)
    curve = metrics.tradeoff_curve(sched, cfg.delta, cfg.dims[0], cfg.K)
    csv_path = out / "fig4_tradeoff.csv"
    curve.to_csv(csv_path)
    sig = [p[0] for p in curve.points]
    figures.save_curves(
        {
            "denoising rate": (sig, [p[1] for p in curve.points]),
            "h(w+)": (sig, [p[2] for p in curve.points]),
            "h(w-)": (sig, [p[3] for p in curve.points]),
        },
        out / "fig4.png",
        title="denoising rate vs class confidence",
        logy=True,
    )
    return ResultBundle(
        curves=[str(csv_path)], figures=[str(out / "fig4.png")],
        meta={"rates_increasing": bool(np.all(np.diff([p[1] for p in curve.points]) > 0))},
    )


# ----------------------------------------------------------------- fig11


def _run_fig11(spec, out):
    base_cfg = spec.config
    base = _base_seed(spec)
    sched = schedule_from_json(spec.schedule)
    count = int(spec.sizes["count"])
    mc = int(spec.sizes["mc_draws"])
    d0, k0 = base_cfg.dims[0], base_cfg.K
    variants = [("default", base_cfg)]
    variants += [
        (f"K{k}", MolrgConfig(n=base_cfg.n, dims=(d0,) * k, delta=base_cfg.delta))
        for k in spec.extra.get("vary_K", [])
    ]
    variants += [
        (f"d{d}", MolrgConfig(n=base_cfg.n, dims=(d,) * k0, delta=base_cfg.delta))
        for d in spec.extra.get("vary_d", [])
    ]
    variants += [
        (f"delta{dl}", MolrgConfig(n=base_cfg.n, dims=(d0,) * k0, delta=dl))
        for dl in spec.extra.get("vary_delta", [])
    ]

    curve_paths, rows, panels = [], [], {}
    worst_exact = worst_approx = 0.0
    for ci, (tag, cfg) in enumerate(variants):
        bases = gen_bases(cfg, seed=(base, ci))
        data = sample_dataset(cfg, bases, count, seed=(base, ci, 1))
        exact = metrics.exact_denoiser(cfg, bases)
        approx = metrics.approx_denoiser(cfg, bases)

        def one_level(sig, _cfg=cfg, _b=bases, _e=exact, _a=approx, _ci=ci):
            sig = float(sig)
            cf = metrics.snr_closed_form(sig, _cfg.delta, _cfg.dims[0], _cfg.K)
            se = metrics.snr_empirical(_e, data, _b, sig, mc_draws=mc, seed=(base, _ci, 2))
            sa = metrics.snr_empirical(_a, data, _b, sig, mc_draws=mc, seed=(base, _ci, 3))
            return cf, se, sa

        vals = parallel_map(one_level, sched.sigmas, spec.threads)
        sig = [float(s) for s in sched.sigmas]
        closed, exact_v, approx_v = (list(v) for v in zip(*vals))
        for s, cf, se, sa in zip(sig, closed, exact_v, approx_v):
            worst_exact = max(worst_exact, abs(se - cf) / cf)
            worst_approx = max(worst_approx, abs(sa - cf) / cf)
            rows.append((tag, s, cf, se, sa, abs(se - cf) / cf, abs(sa - cf) / cf))
        meta = _curve_meta(cfg, base)
        for est, vv in (("closed-form", closed), ("empirical-exact", exact_v), ("empirical-approx", approx_v)):
            c = metrics.SnrCurve(points=list(zip(sig, vv)), estimator=est, meta=meta)
            p = out / f"fig11_{tag}_{est}.csv"
            c.to_csv(p)
            curve_paths.append(str(p))
        panels[tag] = (sig, closed, exact_v, approx_v)

    summary = write_rows_csv(
        out / "fig11_summary.csv",
        ["variant", "sigma", "closed_form", "empirical_exact", "empirical_approx",
         "rel_err_exact", "rel_err_approx"],
        rows,
    )
    import matplotlib.pyplot as plt

    k = len(panels)
    ncol = min(4, k)
    nrow = (k + ncol - 1) // ncol
    fig, axes = plt.subplots(nrow, ncol, figsize=(3.2 * ncol, 2.8 * nrow), squeeze=False)
    for ax, (tag, (sig, cf, se, sa)) in zip(axes.flat, panels.items()):
        ax.plot(sig, cf, label="closed form")
        ax.plot(sig, se, "--", label="optimal (empirical)")
        ax.plot(sig, sa, ":", label="constant gate (empirical)")
        ax.set_xscale("log")
        ax.set_title(tag, fontsize=9)
    for ax in list(axes.flat)[k:]:
        ax.axis("off")
    axes.flat[0].legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out / "fig11.png", dpi=140)
    plt.close(fig)
    return ResultBundle(
        curves=curve_paths,
        tables=[summary],
        figures=[str(out / "fig11.png")],
        meta={"worst_rel_err_exact": worst_exact, "worst_rel_err_approx": worst_approx},
    )


# ----------------------------------------------------------------- fig12


def dump_posterior_projection(model, dataset, sigmas, bases: BasisSet, seed, path):
    """Project denoised outputs onto the first basis column of each of the
    three classes and then onto a seeded random 2-D frame; one CSV row per
    (sample, level) with that level's SNR repeated in the snr column."""
    if bases.K != 3:
        raise WrongClassCount(f"projection dump is defined for 3 classes, got {bases.K}")
    x0, labels = stack_samples(dataset)
    p3 = np.stack([bases.u[k][:, 0] for k in range(3)], axis=1)
    frame = rng_from(seed, 30).standard_normal((3, 2))
    q, _ = np.linalg.qr(frame)
    rows = []
    for li, sig in enumerate(sigmas):
        sig = float(sig)
        eps = rng_from(seed, 31, li).standard_normal(x0.shape)
        xhat = model(x0 + sig * eps, sig, labels)
        coords = (xhat @ p3) @ q
        snr = metrics.snr_empirical(
            model, dataset, bases, sig, mc_draws=1, seed=(seed, 32, li)
        )
        for i in range(coords.shape[0]):
            rows.append((sig, float(coords[i, 0]), float(coords[i, 1]), int(labels[i]), snr))
    return write_rows_csv(path, ["sigma", "x", "y", "label", "snr"], rows)


def _run_fig12(spec, out):
    cfg = spec.config
    if cfg.K != 3:
        raise WrongClassCount("fig12 visualizes a 3-class configuration")
    base = _base_seed(spec)
    bases = gen_bases(cfg, seed=(base, 0))
    data = sample_dataset(cfg, bases, int(spec.sizes["count"]), seed=(base, 1))
    sched = schedule_from_json(spec.schedule)
    sigmas = [float(sched.sigmas[t - 1]) for t in spec.extra["timesteps"]]

    flat_cfg = MolrgConfig(n=cfg.n, dims=cfg.dims, delta=1.0, mixing=cfg.mixing)
    dumps = {
        "optimal": (metrics.exact_denoiser(cfg, bases), cfg),
        "flat-delta": (metrics.exact_denoiser(flat_cfg, bases), flat_cfg),
    }
    paths, fig_paths = [], []
    for tag, (model, mcfg) in dumps.items():
        p = out / f"fig12_{tag}.csv"
        dump_posterior_projection(model, data, sigmas, bases, (base, 2), p)
        paths.append(str(p))
        frames = []
        x0, labels = stack_samples(data)
        p3 = np.stack([bases.u[k][:, 0] for k in range(3)], axis=1)
        q, _ = np.linalg.qr(rng_from((base, 2), 30).standard_normal((3, 2)))
        for li, sig in enumerate(sigmas):
            eps = rng_from((base, 2), 31, li).standard_normal(x0.shape)
            xhat = model(x0 + sig * eps, sig, labels)
            frames.append((f"sigma={sig:.3f}", (xhat @ p3) @ q, labels))
        fp = out / f"fig12_{tag}.png"
        figures.save_scatter_grid(frames, fp, title=f"denoised outputs, {tag} model")
        fig_paths.append(str(fp))
    return ResultBundle(curves=paths, figures=fig_paths, meta={"sigmas": sigmas})


# ----------------------------------------------------------------- tables


def _snr_sweep_for_params(spec, params, cfg, bases, eval_data, grid, seed_tag):
    mc = int(spec.sizes.get("mc_draws", 2))
    base = _base_seed(spec)
    denoiser = metrics.dae_denoiser(params, cfg.delta)

    def one(args):
        li, sig = args
        ratios, _ = metrics.snr_empirical_per_class(
            denoiser, eval_data, bases, float(sig), mc_draws=mc, seed=(base, seed_tag, li)
        )
        return ratios

    return parallel_map(one, list(enumerate(grid)), spec.threads)


def _run_table4(spec, out):
    cfg0 = spec.config
    base = _base_seed(spec)
    grid = spec.extra["grid"]
    sched = schedule_from_json(spec.schedule)
    n_seeds = int(spec.sizes.get("n_seeds", 3))
    arms = [
        ("non-overlap", cfg0, bool(spec.train.get("retract", True))),
        (
            "overlap",
            MolrgConfig(n=cfg0.n, dims=cfg0.dims, delta=cfg0.delta,
                        overlap_angle=float(spec.extra["overlap_angle"])),
            bool(spec.extra.get("overlap_retract", False)),
        ),
    ]
    rows, mean_rows, series = [], [], {}
    for tag, cfg, retract in arms:
        per_seed = []
        for s in range(n_seeds):
            bases = gen_bases(cfg, seed=(base, 40, s))
            data = sample_dataset(cfg, bases, int(spec.sizes["train_count"]), seed=(base, 41, s))
            eval_data = sample_dataset(cfg, bases, int(spec.sizes["eval_count"]), seed=(base, 42, s))
            p0 = dae.init_params(cfg.n, cfg.K, cfg.dims[0], seed=(base, 43, s))
            opts = _train_opts(spec, retract=retract)
            opts.seed = (base, 44, s)
            params, _ = dae.train(p0, data, sched, cfg.delta, opts)
            ratios = _snr_sweep_for_params(spec, params, cfg, bases, eval_data, grid, (45, s))
            snr = [float(np.mean(r)) for r in ratios]
            per_seed.append(snr)
            for sig, v in zip(grid, snr):
                rows.append((tag, s, float(sig), v))
        mean = np.mean(per_seed, axis=0)
        mean_rows.append([tag] + [float(v) for v in mean])
        series[tag] = (list(map(float, grid)), [float(v) for v in mean])
    per_run = write_rows_csv(out / "table4_runs.csv", ["setting", "seed", "sigma", "snr"], rows)
    summary = write_rows_csv(
        out / "table4.csv", ["setting"] + [f"snr_at_{s}" for s in grid], mean_rows
    )
    figures.save_curves(series, out / "table4.png", title="overlap vs non-overlap SNR", logy=True)
    meta = {
        "retract_by_arm": {tag: r for tag, _, r in arms},
        "non_overlap_peak": max(series["non-overlap"][1]),
        "overlap_peak": max(series["overlap"][1]),
        "non_overlap_tail": series["non-overlap"][1][-1],
        "overlap_tail": series["overlap"][1][-1],
    }
    return ResultBundle(
        curves=[], tables=[per_run, summary], figures=[str(out / "table4.png")], meta=meta
    )


def _run_rank_or_mixing_table(spec, out, stem):
    cfg = spec.config
    base = _base_seed(spec)
    grid = spec.extra["grid"]
    sched = schedule_from_json(spec.schedule)
    bases = gen_bases(cfg, seed=(base, 50))
    data = sample_dataset(cfg, bases, int(spec.sizes["train_count"]), seed=(base, 51))
    eval_data = sample_dataset(cfg, bases, int(spec.sizes["eval_count"]), seed=(base, 52))
    p0 = dae.init_params(cfg.n, cfg.K, cfg.dims[0], seed=(base, 53), dims=cfg.dims)
    opts = _train_opts(spec)
    opts.seed = (base, 54)
    params, _ = dae.train(p0, data, sched, cfg.delta, opts)
    ratios = _snr_sweep_for_params(spec, params, cfg, bases, eval_data, grid, 55)

    mc = int(spec.sizes.get("mc_draws", 2))
    pooled = [
        metrics.snr_empirical(
            metrics.dae_denoiser(params, cfg.delta), eval_data, bases, float(sig),
            mc_draws=mc, seed=(base, 55, li), aggregate="pooled",
        )
        for li, sig in enumerate(grid)
    ]
    table_rows = []
    for k in range(cfg.K):
        table_rows.append([f"class_{k}"] + [float(r[k]) for r in ratios])
    table_rows.append(["overall"] + [float(v) for v in pooled])
    path = write_rows_csv(out / f"{stem}.csv", ["row"] + [f"snr_at_{s}" for s in grid], table_rows)
    series = {f"class {k}": (list(map(float, grid)), [float(r[k]) for r in ratios]) for k in range(cfg.K)}
    figures.save_curves(series, out / f"{stem}.png", title=stem, logy=True)
    per_class = np.array([[r[k] for r in ratios] for k in range(cfg.K)])
    return ResultBundle(
        tables=[path],
        figures=[str(out / f"{stem}.png")],
        meta={
            "per_class_snr": per_class.tolist(),
            "grid": [float(s) for s in grid],
            "peak_index_per_class": [int(np.argmax(per_class[k])) for k in range(cfg.K)],
        },
    )


def _run_table5(spec, out):
    return _run_rank_or_mixing_table(spec, out, "table5")


def _run_table6(spec, out):
    return _run_rank_or_mixing_table(spec, out, "table6")


def _run_table7(spec, out):
    base = _base_seed(spec)
    cfg = well_separated_config(spec.config, float(spec.extra["separation"]))
    grid = spec.extra["grid"]
    sched = schedule_from_json(spec.schedule)
    bases = gen_bases(cfg, seed=(base, 60))
    data = sample_dataset(cfg, bases, int(spec.sizes["train_count"]), seed=(base, 61))
    test = sample_dataset(cfg, bases, int(spec.sizes["test_count"]), seed=(base, 62))
    p0 = dae.init_params(cfg.n, cfg.K, cfg.dims[0], seed=(base, 63))
    opts = _train_opts(spec)
    opts.seed = (base, 64)
    params, _ = dae.train(p0, data, sched, cfg.delta, opts)

    probe_curve, snr_curve = _probe_snr_sweep(spec, params, cfg, bases, data, [test], grid)
    exact_curve = metrics.SnrCurve(
        points=[
            (
                float(sig),
                metrics.snr_empirical(
                    metrics.exact_denoiser(cfg, bases), test, bases, float(sig),
                    mc_draws=int(spec.sizes.get("mc_draws", 2)), seed=(base, 65, li),
                ),
            )
            for li, sig in enumerate(grid)
        ],
        estimator="empirical-exact",
        meta=_curve_meta(cfg, base),
    )
    pc = out / "table7_probe.csv"
    sc = out / "table7_snr_dae.csv"
    ec = out / "table7_snr_exact.csv"
    probe_curve.to_csv(pc)
    snr_curve.to_csv(sc)
    exact_curve.to_csv(ec)
    figures.save_twin_curves(
        list(map(float, grid)), probe_curve.values, exact_curve.values,
        out / "table7.png", title="well-separated clusters",
    )
    return ResultBundle(
        curves=[str(pc), str(sc), str(ec)],
        figures=[str(out / "table7.png")],
        meta={
            "acc_at_first": probe_curve.values[0],
            "acc_interior_peak": bool(metrics.unimodality_index(probe_curve).interior_peak),
            "snr_interior_peak": bool(metrics.unimodality_index(snr_curve).interior_peak),
            "exact_snr_interior_peak": bool(metrics.unimodality_index(exact_curve).interior_peak),
        },
    )


# ----------------------------------------------------------------- others


def _run_clean_input(spec, out):
    cfg = spec.config
    base = _base_seed(spec)
    sched = schedule_from_json(spec.schedule)
    bases = gen_bases(cfg, seed=(base, 70))
    data = sample_dataset(cfg, bases, int(spec.sizes["count"]), seed=(base, 71))
    d = cfg.dims[0]

    def one(args):
        li, sig = args
        return metrics.snr_clean_input(float(sig), cfg.delta, d, cfg.K, data, bases, seed=(base, 72, li))

    vals = parallel_map(one, list(enumerate(sched.sigmas)), spec.threads)
    curve = metrics.SnrCurve(
        points=[(float(s), v) for s, v in zip(sched.sigmas, vals)],
        estimator="empirical-exact",
        meta=_curve_meta(cfg, base) | {"input": "clean"},
    )
    path = out / "clean_input_snr.csv"
    curve.to_csv(path)
    figures.save_curves(
        {"clean-input SNR": (list(map(float, sched.sigmas)), list(vals)),
         "1/(K-1)": (list(map(float, sched.sigmas)), [1.0 / (cfg.K - 1)] * len(sched))},
        out / "clean_input_snr.png", title="SNR with clean inputs", logy=True,
    )
    rep = metrics.unimodality_index(curve)
    return ResultBundle(
        curves=[str(path)],
        figures=[str(out / "clean_input_snr.png")],
        meta={"interior_peak": bool(rep.interior_peak), "peak_index": rep.peak_index},
    )


def weight_sharing_compare(config: MolrgConfig, sched, seeds, sizes, train_cfg, threads=1):
    """Shared-across-levels training versus one model per level at matched
    total step budgets; accuracy per level for both plus a far-level transfer
    check for the specialized models."""
    levels = [float(s) for s in sched.sigmas]
    n_levels = len(levels)
    e0 = int(train_cfg.get("epochs_per_level", 15))
    rows, far_rows = [], []
    for s in seeds:
        bases = gen_bases(config, seed=(s, 80))
        data = sample_dataset(config, bases, int(sizes["train_count"]), seed=(s, 81))
        test = sample_dataset(config, bases, int(sizes["test_count"]), seed=(s, 82))
        d = config.dims[0]
        shared_opts = dae.TrainOptions(
            epochs=e0 * n_levels, lr=float(train_cfg.get("lr", 5e-4)),
            batch_size=int(train_cfg.get("batch_size", 128)), seed=(s, 83, 0),
        )
        p0 = dae.init_params(config.n, config.K, d, seed=(s, 84))
        shared, _ = dae.train(p0, data, sched, config.delta, shared_opts)

        def eval_acc(params, sig, tag):
            ftr = probe.extract_features(params, data, sig, "noisy", seed=(s, 85, tag))
            model = probe.train_probe(ftr)
            fte = probe.extract_features(params, test, sig, "noisy", seed=(s, 86, tag))
            return probe.eval_probe(model, fte)

        per_level_params = []
        for li, sig in enumerate(levels):
            sub = sched.subset([li])
            opts = dae.TrainOptions(
                epochs=e0, lr=shared_opts.lr, batch_size=shared_opts.batch_size,
                seed=(s, 83, li),
            )
            params_li, _ = dae.train(p0, data, sub, config.delta, opts)
            per_level_params.append(params_li)
        for li, sig in enumerate(levels):
            acc_shared = eval_acc(shared, sig, (li, 0))
            acc_level = eval_acc(per_level_params[li], sig, (li, 1))
            rows.append((s, sig, acc_shared, acc_level, acc_shared - acc_level))
            far = n_levels - 1 - li
            if far != li:
                far_sig = levels[far]
                far_rows.append(
                    (s, sig, far_sig,
                     eval_acc(per_level_params[li], far_sig, (li, 2)),
                     eval_acc(shared, far_sig, (li, 3)))
                )
    return rows, far_rows


def _run_weight_sharing(spec, out):
    sched = schedule_from_json(spec.schedule)
    base = _base_seed(spec)
    seeds = [(base, i) for i in range(int(spec.sizes.get("n_seeds", 3)))]
    rows, far_rows = weight_sharing_compare(
        spec.config, sched, seeds, spec.sizes, spec.train, spec.threads
    )
    p1 = write_rows_csv(
        out / "weight_sharing.csv",
        ["seed", "sigma", "acc_shared", "acc_per_level", "gap"],
        [(i, *r[1:]) for i, r in enumerate(rows)],
    )
    p2 = write_rows_csv(
        out / "weight_sharing_far.csv",
        ["seed", "train_sigma", "eval_sigma", "acc_per_level_far", "acc_shared_far"],
        [(i, *r[1:]) for i, r in enumerate(far_rows)],
    )
    n_levels = len(sched)
    arr = np.array([r[2:5] for r in rows], dtype=float).reshape(-1, n_levels, 3)
    shared_curve = arr[:, :, 0].mean(axis=0)
    level_curve = arr[:, :, 1].mean(axis=0)
    figures.save_curves(
        {
            "shared": ([float(s) for s in sched.sigmas], shared_curve.tolist()),
            "per-level": ([float(s) for s in sched.sigmas], level_curve.tolist()),
        },
        out / "weight_sharing.png", title="shared vs per-level training",
    )
    var_shared = float(np.max(np.abs(np.diff(shared_curve))))
    var_level = float(np.max(np.abs(np.diff(level_curve))))
    return ResultBundle(
        tables=[p1, p2],
        figures=[str(out / "weight_sharing.png")],
        meta={
            "max_adjacent_variation_shared": var_shared,
            "max_adjacent_variation_per_level": var_level,
            "acc_shared_mean": shared_curve.tolist(),
            "acc_per_level_mean": level_curve.tolist(),
        },
    )


def _run_ensemble(spec, out):
    cfg = spec.config
    base = _base_seed(spec)
    sched = schedule_from_json(spec.schedule)
    center = int(spec.extra["center_index"])
    window = int(spec.extra["window"])
    lo = max(0, center - window)
    hi = min(len(sched) - 1, center + window)
    level_idx = list(range(lo, hi + 1))
    noise_frac = float(spec.extra["label_noise"])
    n_seeds = int(spec.sizes.get("n_seeds", 5))

    bases = gen_bases(cfg, seed=(base, 90))
    if spec.extra.get("features", "trained") == "trained":
        fit_data = sample_dataset(cfg, bases, int(spec.sizes["train_count"]), seed=(base, 96))
        p0 = dae.init_params(cfg.n, cfg.K, cfg.dims[0], seed=(base, 97))
        opts = _train_opts(spec)
        opts.seed = (base, 98)
        feature_model, _ = dae.train(p0, fit_data, sched, cfg.delta, opts)
    else:
        feature_model = bases
    rows = []
    singles_acc = np.zeros((n_seeds, len(level_idx)))
    ens_acc = np.zeros(n_seeds)
    for s in range(n_seeds):
        train_data = sample_dataset(cfg, bases, int(spec.sizes["train_count"]), seed=(base, 91, s))
        test_data = sample_dataset(cfg, bases, int(spec.sizes["test_count"]), seed=(base, 92, s))
        models, test_feats = [], []
        for j, li in enumerate(level_idx):
            sig = float(sched.sigmas[li])
            ftr = probe.extract_features(feature_model, train_data, sig, "noisy",
                                         seed=(base, 93, s, li), delta=cfg.delta)
            noisy_labels = probe.label_noise(ftr.labels, noise_frac, cfg.K, seed=(base, 94, s))
            ftr = probe.FeatureBatch(h=ftr.h, labels=noisy_labels, sigma=ftr.sigma, source=ftr.source)
            model = probe.train_probe(ftr)
            fte = probe.extract_features(feature_model, test_data, sig, "noisy",
                                         seed=(base, 95, s, li), delta=cfg.delta)
            singles_acc[s, j] = probe.eval_probe(model, fte)
            models.append(model)
            test_feats.append(fte)
        ens_acc[s] = probe.ensemble_predict(models, test_feats)
        rows.append(
            (float(sched.sigmas[center]), float(np.max(singles_acc[s])), float(ens_acc[s]), noise_frac)
        )
    path = write_rows_csv(
        out / "ensemble_noise.csv",
        ["center_sigma", "acc_single_best", "acc_ensemble", "label_noise"],
        rows,
    )
    singles_csv = write_rows_csv(
        out / "ensemble_noise_singles.csv",
        ["seed", "sigma", "acc_single"],
        [(s, float(sched.sigmas[li]), float(singles_acc[s, j]))
         for s in range(n_seeds) for j, li in enumerate(level_idx)],
    )
    figures.save_curves(
        {
            "best single": ([r[0] for r in rows], [r[1] for r in rows]),
            "ensemble": ([r[0] for r in rows], [r[2] for r in rows]),
        },
        out / "ensemble_noise.png", title="soft-voting ensemble under label noise",
    )
    return ResultBundle(
        tables=[path, singles_csv],
        figures=[str(out / "ensemble_noise.png")],
        meta={
            "effective_window": len(level_idx),
            "mean_best_single": float(np.mean(np.max(singles_acc, axis=1))),
            "mean_single": float(np.mean(singles_acc)),
            "mean_ensemble": float(np.mean(ens_acc)),
        },
    )


_RUNNERS = {
    "fig3": _run_fig3,
    "fig4": _run_fig4,
    "fig11-grid": _run_fig11,
    "fig12-dump": _run_fig12,
    "table4": _run_table4,
    "table5": _run_table5,
    "table6": _run_table6,
    "table7": _run_table7,
    "clean-input-snr": _run_clean_input,
    "weight-sharing": _run_weight_sharing,
    "ensemble-noise": _run_ensemble,
}
