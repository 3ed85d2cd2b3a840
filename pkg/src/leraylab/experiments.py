"""Monte Carlo drivers for the three quantitative statements: corrector
rate sweep (see corrector module), scaling-limit rate study, and the CLT
fluctuation study; plus log-log rate fitting and bootstrap statistics.

Samples are the unit of parallelism.  Every sample owns an RNG stream keyed
by (master seed, N, sample) -- or (master seed, sample) for the coupled CLT
study -- so records are bit-identical for any worker count.
"""

from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np

from .dynamics import (
    SolverConfig,
    fluctuation,
    solve_clt_limit,
    solve_sde,
    solve_viscous_dense,
    solve_viscous_leray,
)
from .noise import decreasing_factor, gaussian_path, stream, theta_coeffs
from .spectral import SpectralField, lattice, make_noise_basis, sobolev_norm


def initial_field(dim: int, cutoff: int, amplitude: float = 1.0) -> SpectralField:
    """Deterministic smooth divergence-free initial condition: real
    coefficients along the noise-basis directions on the shells |k|^2 <= 4,
    decaying like |k|^-3, normalized to L^2 norm `amplitude`."""
    lat = lattice(dim, cutoff)
    basis = make_noise_basis(dim, min(cutoff, 2))
    coeffs = np.zeros((lat.n, dim), dtype=np.complex128)
    for i, k in enumerate(basis.lattice.modes):
        r = float(np.linalg.norm(k))
        coeffs[lat.index(k)] = basis.vectors[i, 0] / r**3
    u = SpectralField(lat, coeffs)
    return u * (amplitude / np.linalg.norm(u.coeffs))


@dataclass(frozen=True)
class RateStudyConfig:
    """Parameters of one rate study; validated against the theorem boxes."""

    dim: int
    gamma: float
    gamma0: float
    kappa: float
    q: float
    alpha: float
    n_sweep: tuple
    cutoff: int
    samples: int
    T: float
    dt: float
    seed: int
    scheme: str = "ito_euler"
    save_points: int = 200

    def __post_init__(self):
        object.__setattr__(self, "n_sweep", tuple(int(n) for n in self.n_sweep))

    def validate_main(self):
        lo, hi = (self.dim - 2) / 4.0, (self.dim + 2) / 4.0
        if not lo < self.gamma0 < hi:
            raise ValueError(
                f"gamma0 must lie in ((d-2)/4,(d+2)/4) = ({lo},{hi}), "
                f"got {self.gamma0}"
            )
        q_min = max(2.0, 4.0 / (4.0 * self.gamma0 - self.dim + 2.0))
        if self.q <= q_min:
            raise ValueError(
                f"q must exceed max(2, 4/(4*gamma0-d+2)) = {q_min}, got {self.q}"
            )
        a_hi = min(2.0 * self.gamma0, 1.0)
        if not 0.0 < self.alpha < a_hi:
            raise ValueError(
                f"alpha must lie in (0, min(2*gamma0, 1)) = (0, {a_hi}), "
                f"got {self.alpha}"
            )
        self._validate_common()

    def validate_clt(self):
        if self.dim != 3:
            raise ValueError("the CLT study requires d=3 (the theorem is 3D only)")
        if not 1.0 < self.gamma < 1.5:
            raise ValueError(f"gamma must lie in (1, 3/2) for the CLT, got {self.gamma}")
        lo, hi = (self.dim - 2) / 4.0, (self.dim + 2) / 4.0
        if not lo < self.gamma0 < hi:
            raise ValueError(
                f"gamma0 must lie in ((d-2)/4,(d+2)/4) = ({lo},{hi}), "
                f"got {self.gamma0}"
            )
        a_hi = min(1.0, 2.0 * self.gamma0)
        if not 0.5 < self.alpha < a_hi:
            raise ValueError(
                f"alpha0 must lie in (1/2, min(1, 2*gamma0)) = (0.5, {a_hi}), "
                f"got {self.alpha}"
            )
        q_min = max(2.0, 4.0 / (4.0 * self.gamma0 - 1.0))
        if self.q <= q_min:
            raise ValueError(
                f"q must exceed max(2, 4/(4*gamma0-1)) = {q_min}, got {self.q}"
            )
        self._validate_common()

    def _validate_common(self):
        if not 0.0 < self.gamma < self.dim / 2.0:
            raise ValueError(
                f"gamma must lie in (0, d/2) = (0, {self.dim / 2}), got {self.gamma}"
            )
        if self.kappa <= 0:
            raise ValueError(f"kappa must be positive, got {self.kappa}")
        if max(self.n_sweep) > self.cutoff:
            raise ValueError(
                f"noise cutoffs {self.n_sweep} must not exceed the Galerkin "
                f"cutoff M={self.cutoff}"
            )
        if self.samples < 2:
            raise ValueError(f"need at least 2 samples, got {self.samples}")

    def solver_config(self) -> SolverConfig:
        steps = int(round(self.T / self.dt))
        return SolverConfig(
            dt=self.dt,
            T=self.T,
            cutoff=self.cutoff,
            scheme=self.scheme,
            save_every=max(1, steps // self.save_points),
        )

    def config_hash(self) -> str:
        payload = json.dumps(asdict(self), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


@dataclass
class ExperimentRecord:
    """Estimated error at one noise cutoff N, with bootstrap CI."""

    N: int
    error: float
    ci_low: float
    ci_high: float
    epsilon: float
    d_n: float
    samples: int
    flagged: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.error < 0 or self.ci_low < 0 or self.ci_high < self.ci_low:
            raise ValueError("record error/CI must be nonnegative and ordered")


def predicted_main_exponent(cfg: RateStudyConfig) -> float:
    """Slope of log e_N against log N implied by the theorem at delta -> 0:
    e_N ~ eps_N^(alpha/d) with eps_N ~ N^(2 gamma - d); the sharper
    eps_N^(alpha/2) applies when gamma > (d-2)/2."""
    power = 0.5 if cfg.gamma > (cfg.dim - 2.0) / 2.0 else 1.0 / cfg.dim
    return (2.0 * cfg.gamma - cfg.dim) * cfg.alpha * power


def predicted_clt_exponent(cfg: RateStudyConfig) -> float:
    """Slope of log e_N against log N for the root-moment CLT error:
    the q-th moment decays like N^(-q (3-2 gamma)/2 (alpha0 - 1/2))."""
    return -(3.0 - 2.0 * cfg.gamma) / 2.0 * (cfg.alpha - 0.5)


# ---------------------------------------------------------------------------
# per-process caches for the sample workers


@lru_cache(maxsize=4)
def _cached_viscous_frames(cfg: RateStudyConfig):
    u0 = initial_field(cfg.dim, cfg.cutoff)
    return solve_viscous_dense(u0, cfg.gamma0, cfg.kappa, cfg.solver_config())


def _save_indices(cfg: RateStudyConfig):
    scfg = cfg.solver_config()
    steps = scfg.steps
    idx = [0]
    for n in range(steps):
        if (n + 1) % scfg.save_every == 0 or n == steps - 1:
            idx.append(n + 1)
    return idx


def _main_sample(cfg: RateStudyConfig, N: int, sample: int):
    """sup_t ||u^N_t - u~_t||_{H^-alpha} for one independent path."""
    scfg = cfg.solver_config()
    basis = make_noise_basis(cfg.dim, N)
    theta = theta_coeffs(cfg.dim, cfg.gamma, N)
    rng = stream(cfg.seed, N, sample)
    path = gaussian_path(basis, cfg.dt, rng, scfg.steps)
    u0 = initial_field(cfg.dim, cfg.cutoff)
    frames = _cached_viscous_frames(cfg)
    save_idx = _save_indices(cfg)
    try:
        traj = solve_sde(u0, theta, basis, cfg.gamma0, cfg.kappa, scfg, path)
    except RuntimeError:
        return np.nan
    return max(
        sobolev_norm(traj.fields[j] - frames[save_idx[j]], -cfg.alpha)
        for j in range(len(traj.fields))
    )


def _clt_sample(cfg: RateStudyConfig, sample: int):
    """Per-time H^-alpha0 errors ||U^N_t - U_t||^q for every N, one coupled
    Brownian path shared across the sweep; shape {N: (n_times,)}."""
    scfg = cfg.solver_config()
    n_big = max(cfg.n_sweep)
    basis = make_noise_basis(cfg.dim, n_big)
    rng = stream(cfg.seed, sample)
    path = gaussian_path(basis, cfg.dt, rng, scfg.steps)
    frames = _cached_viscous_frames(cfg)
    save_idx = _save_indices(cfg)
    limit = solve_clt_limit(
        frames, cfg.gamma, cfg.gamma0, basis, cfg.kappa, scfg, path
    )
    out = {}
    u0 = initial_field(cfg.dim, cfg.cutoff)
    for N in cfg.n_sweep:
        theta = theta_coeffs(cfg.dim, cfg.gamma, N)
        try:
            traj = solve_sde(u0, theta, basis, cfg.gamma0, cfg.kappa, scfg, path)
        except RuntimeError:
            out[N] = np.full(len(save_idx), np.nan)
            continue
        errs = np.empty(len(save_idx))
        for j in range(len(save_idx)):
            un_fluct = fluctuation(
                traj.fields[j], frames[save_idx[j]], theta.epsilon
            )
            errs[j] = sobolev_norm(un_fluct - limit.fields[j], -cfg.alpha) ** cfg.q
        out[N] = errs
    return out


def _run_tasks(worker, tasks, threads: int):
    """Map worker over tasks, serial or via processes; order preserved."""
    if threads == 1 or len(tasks) == 1:
        return [worker(*t) for t in tasks]
    workers = threads if threads > 0 else (os.cpu_count() or 1)
    workers = min(workers, len(tasks))
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(worker, *zip(*tasks), chunksize=1))


def run_main_rate_study(cfg: RateStudyConfig, threads: int = 0) -> list:
    """Scaling-limit rate study: independent paths per (N, sample); the
    statistic is E[sup_t ||.||^q]^(1/q) (expectation outside the sup)."""
    cfg.validate_main()
    tasks = [(cfg, N, s) for N in cfg.n_sweep for s in range(cfg.samples)]
    values = _run_tasks(_main_sample, tasks, threads)
    records = []
    meta = {"config_hash": cfg.config_hash(), "seed": cfg.seed, "study": "main"}
    for i, N in enumerate(cfg.n_sweep):
        sup_vals = np.array(values[i * cfg.samples : (i + 1) * cfg.samples])
        good = sup_vals[np.isfinite(sup_vals)]
        theta = theta_coeffs(cfg.dim, cfg.gamma, N)
        e_n = float(np.mean(good**cfg.q) ** (1.0 / cfg.q))
        lo, hi = bootstrap_ci(good, cfg.q, 0.95, rng=stream(cfg.seed, N, 10**6))
        records.append(
            ExperimentRecord(
                N=N,
                error=e_n,
                ci_low=lo,
                ci_high=hi,
                epsilon=theta.epsilon,
                d_n=decreasing_factor(theta),
                samples=len(good),
                flagged=int(len(sup_vals) - len(good)),
                meta=dict(meta),
            )
        )
    return records


def run_clt_study(cfg: RateStudyConfig, threads: int = 0) -> list:
    """CLT rate study: one Brownian path per sample shared across the whole
    N sweep; the statistic is (sup_t E||.||^q)^(1/q) (sup outside)."""
    cfg.validate_clt()
    tasks = [(cfg, s) for s in range(cfg.samples)]
    per_sample = _run_tasks(_clt_sample, tasks, threads)
    records = []
    meta = {"config_hash": cfg.config_hash(), "seed": cfg.seed, "study": "clt"}
    for N in cfg.n_sweep:
        mat = np.stack([ps[N] for ps in per_sample])  # (samples, times), ^q
        finite = np.all(np.isfinite(mat), axis=1)
        good = mat[finite]
        e_n = float(np.max(np.mean(good, axis=0)) ** (1.0 / cfg.q))
        lo, hi = _bootstrap_sup_mean(
            good, cfg.q, 0.95, rng=stream(cfg.seed, N, 10**6)
        )
        theta = theta_coeffs(cfg.dim, cfg.gamma, N)
        records.append(
            ExperimentRecord(
                N=N,
                error=e_n,
                ci_low=lo,
                ci_high=hi,
                epsilon=theta.epsilon,
                d_n=decreasing_factor(theta),
                samples=int(np.sum(finite)),
                flagged=int(len(mat) - np.sum(finite)),
                meta=dict(meta),
            )
        )
    return records


def clt_mode_samples(
    cfg: RateStudyConfig, mode, component: int, n_samples: int, threads: int = 0
) -> np.ndarray:
    """Real part of one Fourier coefficient of the limit field U at time T
    over independent driving paths (distributional diagnostics)."""
    cfg.validate_clt()
    tasks = [(cfg, mode, component, s) for s in range(n_samples)]
    return np.array(_run_tasks(_clt_mode_sample, tasks, threads))


def _clt_mode_sample(cfg: RateStudyConfig, mode, component: int, sample: int):
    scfg = cfg.solver_config()
    basis = make_noise_basis(cfg.dim, max(cfg.n_sweep))
    rng = stream(cfg.seed, sample, 777)
    path = gaussian_path(basis, cfg.dt, rng, scfg.steps)
    frames = _cached_viscous_frames(cfg)
    limit = solve_clt_limit(
        frames, cfg.gamma, cfg.gamma0, basis, cfg.kappa, scfg, path
    )
    return float(limit.fields[-1].at(tuple(mode))[component].real)


def fit_rate(records) -> dict:
    """OLS of log e_N on log N (and on log eps_N); nonpositive errors are
    dropped with a warning; fewer than 3 usable points is an error."""
    import warnings

    n_vals, e_vals, eps_vals = [], [], []
    for r in records:
        n, e = (r.N, r.error) if hasattr(r, "N") else (r["N"], r["error"])
        eps = r.epsilon if hasattr(r, "epsilon") else r["epsilon"]
        if e <= 0 or not np.isfinite(e):
            warnings.warn(f"excluding nonpositive error at N={n} from the rate fit")
            continue
        n_vals.append(n)
        e_vals.append(e)
        eps_vals.append(eps)
    if len(e_vals) < 3:
        raise ValueError(
            f"rate fit needs at least 3 positive error values, got {len(e_vals)}"
        )
    x = np.log(np.array(n_vals, dtype=float))
    y = np.log(np.array(e_vals))
    slope, intercept, stderr = _ols(x, y)
    slope_eps, _, _ = _ols(np.log(np.array(eps_vals)), y)
    return {
        "slope": slope,
        "intercept": intercept,
        "stderr": stderr,
        "slope_vs_epsilon": slope_eps,
        "points": len(e_vals),
    }


def _ols(x: np.ndarray, y: np.ndarray):
    A = np.stack([x, np.ones_like(x)], axis=1)
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ coef
    dof = max(len(x) - 2, 1)
    sigma2 = float(resid @ resid) / dof
    sxx = float(np.sum((x - x.mean()) ** 2))
    stderr = np.sqrt(sigma2 / sxx) if sxx > 0 else np.inf
    return float(coef[0]), float(coef[1]), float(stderr)


def bootstrap_ci(
    values, q: float, level: float = 0.95, n_boot: int = 2000, rng=None
):
    """Percentile bootstrap interval for the statistic (mean |X|^q)^(1/q)."""
    values = np.asarray(values, dtype=float)
    if len(values) < 10:
        raise ValueError(f"bootstrap needs at least 10 samples, got {len(values)}")
    if q < 1:
        raise ValueError(f"moment order q must be >= 1, got {q}")
    if not 0 < level < 1:
        raise ValueError(f"level must lie in (0,1), got {level}")
    if rng is None:
        rng = np.random.default_rng(0)
    idx = rng.integers(0, len(values), size=(n_boot, len(values)))
    stats = np.mean(values[idx] ** q, axis=1) ** (1.0 / q)
    tail = 100.0 * (1.0 - level) / 2.0
    lo, hi = np.percentile(stats, [tail, 100.0 - tail])
    return float(lo), float(hi)


def _bootstrap_sup_mean(
    mat: np.ndarray, q: float, level: float, n_boot: int = 2000, rng=None
):
    """Bootstrap of (sup_t mean_samples)^(1/q) for a (samples, times) matrix
    of q-th powers (the CLT study's sup-outside ordering)."""
    if rng is None:
        rng = np.random.default_rng(0)
    n = len(mat)
    idx = rng.integers(0, n, size=(n_boot, n))
    stats = np.max(np.mean(mat[idx], axis=1), axis=1) ** (1.0 / q)
    tail = 100.0 * (1.0 - level) / 2.0
    lo, hi = np.percentile(stats, [tail, 100.0 - tail])
    return float(lo), float(hi)
