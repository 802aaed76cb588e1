"""Command line entry point: ``gatelab {train,probe,expansion-check,report}``.

Exit codes: 0 success, 1 missing inputs, 2 config error, 3 numerical divergence.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import experiment
from .experiment import ConfigError, MissingInputError
from .models import DivergenceError

log = logging.getLogger("gatelab")

EXIT_OK, EXIT_MISSING, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3


def _split(value):
    return [v.strip() for v in value.split(",") if v.strip()] if value else None


def _configs(args):
    """One config per (model, task) combination requested on the command line."""
    tasks = _split(args.tasks)
    models = _split(getattr(args, "models", None))
    base = experiment.load_config(args.config, seed=args.seed)
    if not tasks and not models:
        out = args.out or base.out
        return [experiment.load_config(args.config, seed=args.seed, out=out)]
    root = Path(args.out or "runs")
    configs = []
    for model in models or [base.model]:
        for task in tasks or [base.task]:
            sub = root / (f"{model}_{task}" if models else task)
            configs.append(experiment.load_config(args.config, seed=args.seed, task=task, model=model, out=str(sub)))
    return configs


def cmd_train(args):
    for cfg in _configs(args):
        log.info("training %s on %s -> %s", cfg.model, cfg.task, cfg.out)
        res = experiment.train(cfg, resume=args.resume)
        log.info("checkpoints %s, final loss %s", res.checkpoints, res.losses[-1][1] if res.losses else None)


def _run_dirs(args):
    if args.tasks or getattr(args, "models", None):
        return [Path(c.out) for c in _configs(args)]
    if args.out:
        return [Path(args.out)]
    return [Path(experiment.load_config(args.config, seed=args.seed).out)]


def cmd_probe(args):
    for run in _run_dirs(args):
        results = experiment.probe_run(run, args.checkpoint, anisotropy=args.anisotropy)
        for ck, res in results.items():
            slope = None if res.fit is None else round(res.fit.slope, 4)
            log.info("%s checkpoint %d: slope %s", run, ck, slope)


def cmd_expansion(args):
    for run in _run_dirs(args):
        rep = experiment.expansion_run(run, args.checkpoint)
        log.info("%s: slope %s, ratio median %.4g", run, rep.slope, rep.ratio_median)


def cmd_report(args):
    run_dir = args.run_dir or args.out or "runs"
    summary = experiment.report(run_dir, svg=args.svg)
    print(json.dumps(summary["comparison"], indent=2))


def build_parser():
    parser = argparse.ArgumentParser(prog="gatelab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat JSON config file")
        p.add_argument("--out", help="run directory (or root directory with --tasks/--models)")
        p.add_argument("--seed", type=int, help="base seed; overrides the config")
        p.add_argument("--tasks", help="comma-separated task list for batch runs")
        p.add_argument("--models", help="comma-separated model list for batch runs")

    p = sub.add_parser("train", help="train and write checkpoints + loss.csv")
    common(p)
    p.add_argument("--resume", action="store_true", help="continue from the latest checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("probe", help="sensitivity / effective-LR / slope tables")
    common(p)
    p.add_argument("--checkpoint", type=int, help="checkpoint iteration (default: all)")
    p.add_argument("--anisotropy", action="store_true", help="also write jac_aniso.csv and upd_aniso.csv")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("expansion-check", help="first-order expansion diagnostics")
    common(p)
    p.add_argument("--checkpoint", type=int, help="checkpoint iteration (default: latest)")
    p.set_defaults(func=cmd_expansion)

    p = sub.add_parser("report", help="aggregate a run directory into summary.json")
    p.add_argument("run_dir", nargs="?")
    p.add_argument("--out", help="alias for run_dir")
    p.add_argument("--svg", action="store_true", help="also write slope.svg per run")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except MissingInputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
