"""Command-line entry point.

    molrg-lab run --experiment fig3 --out DIR [--seed S] [--threads N] [--config FILE.json]
    molrg-lab plot --in a.csv b.csv --out fig.svg [--title T] [--ylabel L]

Exit codes: 0 on success, 2 on an invalid specification or arguments, 3 on a
mid-run failure (partial results plus a failure marker are flushed).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import experiments, svgplot
from .errors import InvalidSpec, MolrgLabError, SchemaMismatch, UnknownExperiment


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="molrg-lab")
    sub = parser.add_subparsers(dest="command", required=True)

    runp = sub.add_parser("run", help="run a named experiment end to end")
    runp.add_argument("--experiment", required=False, help=f"one of {experiments.EXPERIMENT_NAMES}")
    runp.add_argument("--out", required=True, help="output directory")
    runp.add_argument("--seed", type=int, default=0)
    runp.add_argument("--threads", type=int, default=None,
                      help="worker threads (default: MOLRG_LAB_THREADS or all cores)")
    runp.add_argument("--config", default=None,
                      help="JSON spec file (a previous run's meta.json also works)")

    plotp = sub.add_parser("plot", help="render curve CSVs as one SVG")
    plotp.add_argument("--in", dest="inputs", nargs="+", required=True)
    plotp.add_argument("--out", required=True)
    plotp.add_argument("--title", default="")
    plotp.add_argument("--ylabel", default="value")
    return parser


def _cmd_run(args) -> int:
    try:
        if args.config:
            spec = experiments.ExperimentSpec.from_dict(json.loads(Path(args.config).read_text()))
            spec.out_dir = args.out
            if args.threads:
                spec.threads = experiments.resolve_threads(args.threads)
            if args.experiment and args.experiment != spec.name:
                raise InvalidSpec(
                    f"--experiment {args.experiment} conflicts with config name {spec.name}"
                )
        else:
            if not args.experiment:
                raise InvalidSpec("either --experiment or --config is required")
            spec = experiments.default_spec(
                args.experiment, out_dir=args.out, seed=args.seed, threads=args.threads
            )
    except (UnknownExperiment, InvalidSpec, KeyError, json.JSONDecodeError) as exc:
        print(f"invalid spec: {exc}", file=sys.stderr)
        return 2
    try:
        bundle = experiments.run(spec)
    except MolrgLabError as exc:
        print(f"invalid spec: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return 3
    for group in (bundle.curves, bundle.tables, bundle.figures):
        for path in group:
            print(path)
    print(str(Path(spec.out_dir) / "meta.json"))
    return 0


def _cmd_plot(args) -> int:
    try:
        svgplot.plot_curves(args.inputs, args.out, title=args.title, ylabel=args.ylabel)
    except (SchemaMismatch, FileNotFoundError) as exc:
        print(f"plot failed: {exc}", file=sys.stderr)
        return 2
    print(args.out)
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "run":
        return _cmd_run(args)
    return _cmd_plot(args)


if __name__ == "__main__":
    sys.exit(main())
