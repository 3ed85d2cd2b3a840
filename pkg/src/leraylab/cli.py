"""Command-line front end: config resolution, validation, run directories
with manifests and lock files, JSONL/CSV persistence, and report figures.

Exit codes: 0 success, 1 validation error (a theorem parameter-box or input
constraint was violated), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .corrector import corrector_check_rows
from .dynamics import SolverConfig, solve_sde, solve_viscous_leray
from .experiments import (
    ExperimentRecord,
    RateStudyConfig,
    fit_rate,
    initial_field,
    predicted_clt_exponent,
    predicted_main_exponent,
    run_clt_study,
    run_main_rate_study,
)
from .noise import gaussian_path, stream, theta_coeffs
from .spectral import make_noise_basis, sobolev_norm

STUDY_DEFAULTS = {
    2: {
        "dim": 2,
        "gamma": 0.5,
        "gamma0": 0.6,
        # dt * |S_theta| at the top shell stays below ~0.5 for this kappa at
        # M=48, dt=1e-3; larger values churn the stiff modes of the corrector
        # drift and wreck pathwise energy control.
        "kappa": 0.005,
        "q": 3.0,
        "alpha": 0.9,
        "n_sweep": [4, 8, 16, 32],
        "cutoff": 48,
        "samples": 64,
        "T": 0.3,
        "dt": 1e-3,
        "scheme": "ito_euler",
        "save_points": 200,
        "seed": 0,
    },
    3: {
        "dim": 3,
        "gamma": 1.1,
        "gamma0": 0.8,
        # Small enough that the second-order multiplicative term (relative
        # size ~ sqrt(kappa)) does not swamp the N-decay of the coupled
        # fluctuation error at desk-scale N.
        "kappa": 0.005,
        "q": 3.0,
        "alpha": 0.7,
        "n_sweep": [2, 4, 8],
        "cutoff": 12,
        "samples": 32,
        "T": 0.3,
        "dt": 1e-3,
        "scheme": "ito_euler",
        "save_points": 200,
        "seed": 0,
    },
}

SIM_DEFAULTS = {
    "dim": 2,
    "gamma": 0.5,
    "gamma0": 0.6,
    "kappa": 0.01,
    "N": 8,
    "cutoff": 16,
    "T": 0.3,
    "dt": 1e-3,
    "scheme": "ito_euler",
    "save_points": 50,
    "seed": 0,
    "sample": 0,
}

CORR_DEFAULTS = {
    "dim": 2,
    "gamma": 0.5,
    "kappa": 1.0,
    "alphas": [0.0, 0.5, 1.0],
    "n_sweep": [4, 8, 16, 32],
    "seed": 0,
}


def config_hash(cfg: dict) -> str:
    """Stable under key reordering: canonical sorted-key JSON."""
    return hashlib.sha256(
        json.dumps(cfg, sort_keys=True).encode()
    ).hexdigest()[:16]


def _load_config(path) -> dict:
    with open(path) as fh:
        cfg = json.load(fh)
    if not isinstance(cfg, dict):
        raise ValueError(f"config {path} must be a JSON object")
    return cfg


def resolve_config(defaults: dict, args) -> dict:
    """defaults < config file < CLI flags; seed/out also from environment."""
    cfg = dict(defaults)
    if args.config:
        file_cfg = _load_config(args.config)
        unknown = set(file_cfg) - set(cfg)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(file_cfg)
    if args.dim is not None and "dim" in cfg:
        cfg["dim"] = args.dim
    env_seed = os.environ.get("LERAY_SEED")
    if env_seed is not None:
        cfg["seed"] = int(env_seed)
    if args.seed is not None:
        cfg["seed"] = args.seed
    for key in ("gamma", "gamma0", "kappa", "alpha", "T", "dt"):
        val = getattr(args, key.replace("-", "_"), None)
        if val is not None and key in cfg:
            cfg[key] = val
    if getattr(args, "n_sweep", None) is not None and "n_sweep" in cfg:
        cfg["n_sweep"] = [int(x) for x in args.n_sweep.split(",")]
    if getattr(args, "samples", None) is not None and "samples" in cfg:
        cfg["samples"] = args.samples
    if getattr(args, "alphas", None) is not None and "alphas" in cfg:
        cfg["alphas"] = [float(x) for x in args.alphas.split(",")]
    return cfg


def resolve_out(args) -> Path:
    out = args.out or os.environ.get("LERAY_OUT") or "runs"
    return Path(out)


class RunDir:
    """One directory per run keyed by config hash; sole-writer lock file;
    manifest written before any compute starts."""

    def __init__(self, root: Path, subcommand: str, cfg: dict, config_path):
        self.hash = config_hash(cfg)
        self.path = root / f"{subcommand}-{self.hash}"
        self.path.mkdir(parents=True, exist_ok=True)
        self._lock = self.path / ".lock"
        try:
            fd = os.open(self._lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            os.write(fd, str(os.getpid()).encode())
            os.close(fd)
        except FileExistsError:
            raise RuntimeError(
                f"run directory {self.path} is locked by another process "
                f"(remove {self._lock} if stale)"
            )
        manifest = {
            "subcommand": subcommand,
            "config_path": str(config_path) if config_path else None,
            "config": cfg,
            "config_hash": self.hash,
            "version": __version__,
            "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
            "seed": cfg.get("seed"),
            "complete": False,
        }
        self._manifest = manifest
        self.write_json("manifest.json", manifest)

    def write_json(self, name: str, obj):
        with open(self.path / name, "w") as fh:
            json.dump(obj, fh, indent=2, sort_keys=True)
            fh.write("\n")

    def write_jsonl(self, name: str, rows):
        with open(self.path / name, "a") as fh:
            for row in rows:
                fh.write(json.dumps(row, sort_keys=True) + "\n")

    def finish(self):
        self._manifest["complete"] = True
        self.write_json("manifest.json", self._manifest)
        self._lock.unlink(missing_ok=True)

    def abort(self):
        self._lock.unlink(missing_ok=True)


def emit_plot_data(records, kind: str, path, predicted_exponent: float):
    """CSV of log N vs log error with CI columns and the reference slope."""
    records = list(records)
    if not records:
        raise ValueError("no records to emit")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(
            [
                "N", "log_N", "error", "log_error", "ci_low", "ci_high",
                "epsilon", "predicted_exponent",
            ]
        )
        for r in records:
            w.writerow(
                [
                    r.N,
                    f"{np.log(r.N):.12g}",
                    f"{r.error:.12g}",
                    f"{np.log(r.error):.12g}" if r.error > 0 else "nan",
                    f"{r.ci_low:.12g}",
                    f"{r.ci_high:.12g}",
                    f"{r.epsilon:.12g}",
                    f"{predicted_exponent:.12g}",
                ]
            )
    return path


def records_from_csv(path) -> list:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(
                {
                    "N": int(row["N"]),
                    "error": float(row["error"]),
                    "epsilon": float(row["epsilon"]),
                }
            )
    return out


def _study_config(cfg: dict) -> RateStudyConfig:
    return RateStudyConfig(
        dim=int(cfg["dim"]),
        gamma=float(cfg["gamma"]),
        gamma0=float(cfg["gamma0"]),
        kappa=float(cfg["kappa"]),
        q=float(cfg["q"]),
        alpha=float(cfg["alpha"]),
        n_sweep=tuple(cfg["n_sweep"]),
        cutoff=int(cfg["cutoff"]),
        samples=int(cfg["samples"]),
        T=float(cfg["T"]),
        dt=float(cfg["dt"]),
        seed=int(cfg["seed"]),
        scheme=cfg["scheme"],
        save_points=int(cfg["save_points"]),
    )


def _run_study(args, kind: str) -> int:
    from .plots import rate_figure

    defaults = STUDY_DEFAULTS[3 if kind == "clt" else (args.dim or 2)]
    cfg = resolve_config(defaults, args)
    study = _study_config(cfg)
    if kind == "clt":
        study.validate_clt()
        predicted = predicted_clt_exponent(study)
    else:
        study.validate_main()
        predicted = predicted_main_exponent(study)
    run = RunDir(resolve_out(args), kind, cfg, args.config)
    try:
        if kind == "clt":
            records = run_clt_study(study, threads=args.threads)
        else:
            records = run_main_rate_study(study, threads=args.threads)
        fit = fit_rate(records)
        summary = {
            "predicted_exponent": predicted,
            "fitted_slope": fit["slope"],
            "stderr": fit["stderr"],
            "slope_vs_epsilon": fit["slope_vs_epsilon"],
            "slope_negative_2sigma": fit["slope"] + 2 * fit["stderr"] < 0,
            "slope_within_bound": fit["slope"] <= predicted + 0.15,
            "monotone_extremes": records[-1].error < records[0].error,
        }
        run.write_jsonl("records.jsonl", [asdict(r) for r in records])
        run.write_json("summary.json", summary)
        emit_plot_data(records, kind, run.path / "plot_data.csv", predicted)
        rate_figure(records, predicted, f"{kind} rate study", run.path / "rate.png")
    except Exception:
        run.abort()
        raise
    run.finish()
    print(f"{kind}: slope {fit['slope']:+.4f} (predicted {predicted:+.4f}) "
          f"stderr {fit['stderr']:.4f} -> {run.path}")
    return 0


def _run_corrector_check(args) -> int:
    from .plots import corrector_figure

    defaults = dict(CORR_DEFAULTS)
    if args.dim is not None:
        defaults["dim"] = args.dim
    cfg = resolve_config(defaults, args)
    rows = corrector_check_rows(
        int(cfg["dim"]),
        float(cfg["gamma"]),
        float(cfg["kappa"]),
        [float(a) for a in cfg["alphas"]],
        [int(n) for n in cfg["n_sweep"]],
    )
    run = RunDir(resolve_out(args), "corrector-check", cfg, args.config)
    try:
        run.write_jsonl("records.jsonl", rows)
        with open(run.path / "report.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
        corrector_figure(rows, run.path / "ratio.png")
    except Exception:
        run.abort()
        raise
    run.finish()
    for r in rows:
        print(
            f"N={r['N']:>3} alpha={r['alpha']:<4} D_N={r['D_N']:.4e} "
            f"op_norm={r['op_norm']:.4e} ratio={r['ratio']:.4f}"
        )
    print(f"-> {run.path}")
    return 0


def _run_simulate(args) -> int:
    cfg = resolve_config(SIM_DEFAULTS, args)
    dim, M, N = int(cfg["dim"]), int(cfg["cutoff"]), int(cfg["N"])
    if N > M:
        raise ValueError(f"noise cutoff N={N} must not exceed Galerkin cutoff M={M}")
    theta = theta_coeffs(dim, float(cfg["gamma"]), N)
    basis = make_noise_basis(dim, N)
    steps = int(round(float(cfg["T"]) / float(cfg["dt"])))
    scfg = SolverConfig(
        dt=float(cfg["dt"]),
        T=float(cfg["T"]),
        cutoff=M,
        scheme=cfg["scheme"],
        save_every=max(1, steps // int(cfg["save_points"])),
    )
    path = gaussian_path(
        basis, scfg.dt, stream(int(cfg["seed"]), N, int(cfg["sample"])), steps
    )
    u0 = initial_field(dim, M)
    run = RunDir(resolve_out(args), "simulate", cfg, args.config)
    try:
        traj = solve_sde(
            u0, theta, basis, float(cfg["gamma0"]), float(cfg["kappa"]), scfg, path
        )
        header = {
            "scheme": scfg.scheme, "dt": scfg.dt, "T": scfg.T, "M": M, "N": N,
            "gamma": cfg["gamma"], "gamma0": cfg["gamma0"], "kappa": cfg["kappa"],
            "seed": cfg["seed"], "sample": cfg["sample"],
        }
        rows = [header] + [
            {"t": float(t), **f.to_snapshot()}
            for t, f in zip(traj.times, traj.fields)
        ]
        run.write_jsonl("checkpoints.jsonl", rows)
        energies = [float(np.linalg.norm(f.coeffs)) for f in traj.fields]
        from .plots import energy_figure

        energy_figure(traj.times, energies, "SDE path energy", run.path / "energy.png")
    except Exception:
        run.abort()
        raise
    run.finish()
    print(f"simulate: {len(traj.fields)} frames -> {run.path}")
    return 0


def _run_viscous(args) -> int:
    cfg = resolve_config(SIM_DEFAULTS, args)
    dim, M = int(cfg["dim"]), int(cfg["cutoff"])
    steps = int(round(float(cfg["T"]) / float(cfg["dt"])))
    scfg = SolverConfig(
        dt=float(cfg["dt"]),
        T=float(cfg["T"]),
        cutoff=M,
        save_every=max(1, steps // int(cfg["save_points"])),
    )
    u0 = initial_field(dim, M)
    run = RunDir(resolve_out(args), "viscous", cfg, args.config)
    try:
        traj = solve_viscous_leray(u0, float(cfg["gamma0"]), float(cfg["kappa"]), scfg)
        header = {
            "scheme": "exp_euler", "dt": scfg.dt, "T": scfg.T, "M": M,
            "gamma0": cfg["gamma0"], "kappa": cfg["kappa"],
        }
        rows = [header] + [
            {"t": float(t), **f.to_snapshot()}
            for t, f in zip(traj.times, traj.fields)
        ]
        run.write_jsonl("checkpoints.jsonl", rows)
        with open(run.path / "energy.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "l2", "h1"])
            for t, f in zip(traj.times, traj.fields):
                w.writerow(
                    [f"{t:.12g}",
                     f"{np.linalg.norm(f.coeffs):.12g}",
                     f"{sobolev_norm(f, 1.0):.12g}"]
                )
    except Exception:
        run.abort()
        raise
    run.finish()
    print(f"viscous: {len(traj.fields)} frames -> {run.path}")
    return 0


def _run_fit(args) -> int:
    if args.records is None:
        raise ValueError("fit requires --records pointing at records.jsonl or CSV")
    path = Path(args.records)
    if path.suffix == ".csv":
        records = records_from_csv(path)
    else:
        records = []
        with open(path) as fh:
            for line in fh:
                if line.strip():
                    records.append(json.loads(line))
    fit = fit_rate(records)
    print(json.dumps(fit, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="leray-lab",
        description="Monte Carlo laboratory for the stochastic inviscid "
        "Leray-alpha model with transport noise",
    )
    sub = p.add_subparsers(dest="subcommand", required=True)
    for name in ("corrector-check", "simulate", "viscous", "convergence", "clt", "fit"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", type=str, default=None)
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", type=str, default=None)
        sp.add_argument("--threads", type=int, default=0, help="0 = auto")
        sp.add_argument("--dim", type=int, choices=(2, 3), default=None)
        sp.add_argument("--gamma", type=float, default=None)
        sp.add_argument("--gamma0", type=float, default=None)
        sp.add_argument("--kappa", type=float, default=None)
        sp.add_argument("--T", type=float, default=None)
        sp.add_argument("--dt", type=float, default=None)
        sp.add_argument("--samples", type=int, default=None)
        sp.add_argument("--n-sweep", dest="n_sweep", type=str, default=None,
                        help="comma-separated noise cutoffs")
        if name == "corrector-check":
            sp.add_argument("--alpha", dest="alphas", type=str, default=None,
                            help="comma-separated alpha values")
        else:
            sp.add_argument("--alpha", type=float, default=None)
        if name == "fit":
            sp.add_argument("--records", type=str, default=None)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 1 if e.code not in (0, None) else 0
    try:
        if args.subcommand == "convergence":
            return _run_study(args, "convergence")
        if args.subcommand == "clt":
            return _run_study(args, "clt")
        if args.subcommand == "corrector-check":
            return _run_corrector_check(args)
        if args.subcommand == "simulate":
            return _run_simulate(args)
        if args.subcommand == "viscous":
            return _run_viscous(args)
        if args.subcommand == "fit":
            return _run_fit(args)
        raise ValueError(f"unknown subcommand {args.subcommand}")
    except (ValueError, KeyError, FileNotFoundError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # runtime failure
        print(f"runtime failure: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
