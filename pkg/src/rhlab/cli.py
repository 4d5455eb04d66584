"""Command-line driver.

Subcommands: sample-field, corr-decay, green-const, corrector, ahom,
avg-green, green-rates, homog-rate, poincare.  Common flags: --config
(JSON key-value file), --seed, --out, --replicas, --threads.  Exit codes:
0 success, 2 configuration error, 3 numerical non-convergence, 4 degenerate
fit.

Result files (CSV/JSON/dat) are byte-identical for identical config and
seed, regardless of --threads; wall time and worker count land in
runlog.json only.
"""

import argparse
import sys

import numpy as np

from . import io
from .coeffs import evaluate_map
from .experiments import (ConfigError, ExperimentConfig, Stopwatch,
                          run_corr_experiment, run_green_experiment,
                          run_poincare_check, run_rate_experiment,
                          write_runlog, _build_env, _build_lattice, _build_map,
                          _ensure_dir, _estimate_ahom_swept, STREAM_MAIN)
from .greens import averaged_green, lattice_green, radial_reduce
from .homogenize import corrector_set
from .solver import ConvergenceError, solve_richardson
from .stats import FitDegenerateError


def _common_flags(sub):
    sub.add_argument("--config", help="JSON config file")
    sub.add_argument("--seed", type=int, help="override the sampling seed")
    sub.add_argument("--out", default=".", help="output directory")
    sub.add_argument("--replicas", type=int, help="override replica count")
    sub.add_argument("--threads", type=int, default=1, help="worker threads")


def _load_config(args, experiment: str) -> ExperimentConfig:
    if args.config:
        cfg = ExperimentConfig.from_file(args.config)
        if cfg.experiment != experiment:
            raise ConfigError(f"config is for {cfg.experiment!r}, "
                              f"command is {experiment!r}")
    else:
        cfg = ExperimentConfig.from_dict({"experiment": experiment})
    if args.seed is not None:
        cfg.seed = args.seed
    if args.replicas is not None:
        cfg.replicas = args.replicas
        if cfg.replicas < 2:
            raise ConfigError("replicas must be >= 2")
    return cfg


def _cmd_sample_field(cfg: ExperimentConfig, outdir, threads: int):
    lattice = _build_lattice(cfg)
    spec = _build_env(cfg, lattice)
    field = spec.sample(0, STREAM_MAIN)
    io.write_field(outdir / "field.rhl", field)
    io.write_json(outdir / "summary.json", {
        "experiment": "sample-field", "config": cfg.echo(),
        "mean": float(field.values.mean()), "variance": float(field.values.var()),
    })


def _cmd_green_const(cfg: ExperimentConfig, outdir, threads: int):
    lattice = _build_lattice(cfg)
    eta = cfg.eta if cfg.eta is not None else 1.0
    matrix = np.asarray(cfg.matrix, dtype=float) if cfg.matrix else np.eye(lattice.d)
    g = lattice_green(eta, matrix, lattice)
    io.write_field(outdir / "green.rhl", g)
    r, v, s = radial_reduce(lattice, g.values, np.zeros(lattice.sides), r_min=0.0)
    io.write_csv(outdir / "radial.csv", ["r", "mean"], zip(r.tolist(), v.tolist()))
    io.write_dat(outdir / "radial.dat", r, v)
    io.write_json(outdir / "summary.json", {
        "experiment": "green-const", "config": cfg.echo(),
        "eta_total_mass": float(eta * g.values.sum()),
    })


def _cmd_corrector(cfg: ExperimentConfig, outdir, threads: int):
    lattice = _build_lattice(cfg)
    spec = _build_env(cfg, lattice)
    cmap = _build_map(cfg)
    eta = cfg.eta if cfg.eta is not None else 1.0 / min(lattice.sides) ** 2
    a = evaluate_map(cmap, spec.sample(0, STREAM_MAIN))
    cset = corrector_set(a, eta, method=cfg.method, tol=cfg.tol)
    reports = []
    for k, chi in enumerate(cset.correctors):
        io.write_field(outdir / f"corrector_{k}.rhl", chi)
        if cfg.method == "richardson":
            _, trace = solve_richardson(eta, a, np.eye(lattice.d)[k], tol=cfg.tol)
            reports.append(trace.to_json())
    io.write_json(outdir / "summary.json", {
        "experiment": "corrector", "config": cfg.echo(), "eta": eta,
        "method": cfg.method, "reports": reports,
    })


def _cmd_ahom(cfg: ExperimentConfig, outdir, threads: int):
    lattice = _build_lattice(cfg)
    est = _estimate_ahom_swept(cfg, lattice.sides,
                               cfg.eta_sweep or [4 / min(lattice.sides) ** 2,
                                                 2 / min(lattice.sides) ** 2,
                                                 1 / min(lattice.sides) ** 2],
                               threads)
    io.write_json(outdir / "ahom.json", est.to_json())
    io.write_json(outdir / "summary.json",
                  {"experiment": "ahom", "config": cfg.echo(), "ahom": est.to_json()})


def _cmd_avg_green(cfg: ExperimentConfig, outdir, threads: int):
    lattice = _build_lattice(cfg)
    spec = _build_env(cfg, lattice)
    cmap = _build_map(cfg)
    eta = cfg.eta if cfg.eta is not None else cmap.upper / min(lattice.sides) ** 2
    est = averaged_green(spec, cmap, eta, cfg.replicas, tol=cfg.tol,
                         threads=threads)
    from .lattice import ScalarField

    io.write_field(outdir / "mean.rhl", ScalarField(lattice, est.mean))
    io.write_field(outdir / "stderr.rhl", ScalarField(lattice, est.stderr))
    r, v, s = est.radial_table(r_min=0.0)
    io.write_csv(outdir / "radial.csv", ["r", "mean", "stderr"],
                 zip(r.tolist(), v.tolist(), s.tolist()))
    io.write_dat(outdir / "radial.dat", r, v)
    io.write_json(outdir / "summary.json", {
        "experiment": "avg-green", "config": cfg.echo(), "eta": eta,
        "eta_total_mass": float(eta * est.mean.sum()),
        "skipped_replicas": est.skipped,
    })


_EXPERIMENT_RUNNERS = {
    "corr-decay": run_corr_experiment,
    "green-rates": run_green_experiment,
    "homog-rate": run_rate_experiment,
    "poincare": run_poincare_check,
}

_OPERATION_RUNNERS = {
    "sample-field": _cmd_sample_field,
    "green-const": _cmd_green_const,
    "corrector": _cmd_corrector,
    "ahom": _cmd_ahom,
    "avg-green": _cmd_avg_green,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="rhlab",
        description="Lattice random-coefficient equation laboratory")
    subs = parser.add_subparsers(dest="command", required=True)
    for name in list(_OPERATION_RUNNERS) + list(_EXPERIMENT_RUNNERS):
        _common_flags(subs.add_parser(name))
    args = parser.parse_args(argv)

    try:
        cfg = _load_config(args, args.command)
        outdir = _ensure_dir(args.out)
        with Stopwatch() as watch:
            if args.command in _OPERATION_RUNNERS:
                _OPERATION_RUNNERS[args.command](cfg, outdir, args.threads)
            else:
                result = _EXPERIMENT_RUNNERS[args.command](cfg, threads=args.threads)
                result.write(outdir)
        write_runlog(outdir, args.threads, watch.elapsed)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except ConvergenceError as exc:
        print(f"numerical non-convergence: {exc}", file=sys.stderr)
        return 3
    except FitDegenerateError as exc:
        print(f"degenerate fit: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
