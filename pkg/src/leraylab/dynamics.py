"""Nonlinear transport term, Galerkin drift/diffusion fields, and the time
steppers: stochastic Galerkin SDE, deterministic viscous solver, and the
linear fluctuation-limit SPDE.

The transport convolution is evaluated either by a direct double sum
(reference path, quadratic cost) or on a zero-padded FFT grid large enough
that no aliased mode can land inside the retained ball.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np
from scipy.fft import next_fast_len

from .corrector import C_D, C_D_PRIME, GalerkinCorrector, galerkin_corrector
from .noise import ThetaCoefficients
from .spectral import (
    TWO_PI,
    NoiseBasis,
    SpectralField,
    heat_semigroup,
    lattice,
    leray_project,
    smoothing_k,
)


@lru_cache(maxsize=32)
def _grid_indices(dim: int, cutoff: int, G: int):
    lat = lattice(dim, cutoff)
    return tuple(np.ascontiguousarray(lat.modes[:, a] % G) for a in range(dim))


def _fft_size(*cutoffs: int) -> int:
    # padded so that true modes (sum of supports) cannot alias into the ball
    return next_fast_len(sum(cutoffs) + 1)


def _phys_components(u: SpectralField, G: int) -> np.ndarray:
    """Physical-space samples of each component on the padded G^d grid."""
    dim = u.dim
    idx = _grid_indices(dim, u.cutoff, G)
    out = np.empty((dim,) + (G,) * dim, dtype=np.complex128)
    for c in range(dim):
        grid = np.zeros((G,) * dim, dtype=np.complex128)
        grid[idx] = u.coeffs[:, c]
        out[c] = np.fft.ifftn(grid) * G**dim
    return out


def _phys_gradient(u: SpectralField, G: int) -> np.ndarray:
    """Physical-space samples of d_j u_c, shape (d, d, G, ..., G): [j, c]."""
    dim = u.dim
    idx = _grid_indices(dim, u.cutoff, G)
    factors = TWO_PI * 1j * u.lattice.modes  # (n, d)
    out = np.empty((dim, dim) + (G,) * dim, dtype=np.complex128)
    for j in range(dim):
        for c in range(dim):
            grid = np.zeros((G,) * dim, dtype=np.complex128)
            grid[idx] = factors[:, j] * u.coeffs[:, c]
            out[j, c] = np.fft.ifftn(grid) * G**dim
    return out


def _advect_phys(
    v_phys: np.ndarray, grad_phys: np.ndarray, dim: int, cutoff: int, G: int
) -> SpectralField:
    """Pi applied to the product field sum_j v_j d_j u, truncated to cutoff."""
    lat = lattice(dim, cutoff)
    idx = _grid_indices(dim, cutoff, G)
    coeffs = np.empty((lat.n, dim), dtype=np.complex128)
    for c in range(dim):
        prod = np.zeros_like(v_phys[0])
        for j in range(dim):
            prod += v_phys[j] * grad_phys[j, c]
        coeffs[:, c] = np.fft.fftn(prod)[idx] / G**dim
    return leray_project(SpectralField(lat, coeffs))


def transport_term(
    v: SpectralField, u: SpectralField, cutoff: int, method: str = "fft"
) -> SpectralField:
    """Pi(v . grad u) truncated to the given cutoff.

    method="fft" uses the padded pseudo-spectral product (production path);
    method="direct" evaluates the convolution sum mode by mode (oracle).
    """
    if v.dim != u.dim:
        raise ValueError("dimension mismatch between v and u")
    if method == "direct":
        return _transport_direct(v, u, cutoff)
    G = _fft_size(v.cutoff, u.cutoff, cutoff)
    v_phys = _phys_components(v, G)
    grad = _phys_gradient(u, G)
    return _advect_phys(v_phys, grad, u.dim, cutoff, G)


def _transport_direct(v: SpectralField, u: SpectralField, cutoff: int) -> SpectralField:
    dim = u.dim
    out_lat = lattice(dim, cutoff)
    coeffs = np.zeros((out_lat.n, dim), dtype=np.complex128)
    u_modes = u.lattice.modes
    for jrow, j in enumerate(v.lattice.modes):
        vj = v.coeffs[jrow]
        # term: (v_hat[j] . 2 pi i q) u_hat[q] placed at m = j + q
        for qrow, q in enumerate(u_modes):
            m = j + q
            if np.dot(m, m) == 0 or np.dot(m, m) > cutoff * cutoff:
                continue
            coeffs[out_lat.index(m)] += TWO_PI * 1j * (vj @ u_modes[qrow]) * u.coeffs[qrow]
    return leray_project(SpectralField(out_lat, coeffs))


def galerkin_drift_b(u: SpectralField, gamma0: float, cutoff: int) -> SpectralField:
    """b_N(u) = Pi_N((K_N u) . grad (Pi_N u)); orthogonal to u."""
    un = u.restrict(cutoff)
    return transport_term(smoothing_k(un, gamma0), un, cutoff)


def galerkin_diffusion_g(
    u: SpectralField, k, i: int, basis: NoiseBasis, cutoff: int
) -> SpectralField:
    """G_N^{k,i}(u) = Pi_N Pi(sigma_{k,i} . grad (Pi_N u)): shift by k with
    factor 2 pi i (a_{k,i} . source mode), then project and truncate."""
    un = u.restrict(cutoff)
    a = basis.at(k, i)
    k = np.asarray(k, dtype=int)
    out_lat = un.lattice
    coeffs = np.zeros_like(un.coeffs)
    for row, m in enumerate(un.lattice.modes):
        target = m + k
        n2 = int(np.dot(target, target))
        if n2 == 0 or n2 > cutoff * cutoff:
            continue
        coeffs[out_lat.index(target)] += TWO_PI * 1j * float(a @ m) * un.coeffs[row]
    return leray_project(SpectralField(out_lat, coeffs))


def noise_field(
    weights: np.ndarray, basis: NoiseBasis, entries: np.ndarray
) -> SpectralField:
    """Assemble xi with xi_hat[k] = w_k sum_i entries[k, i] a_{k,i}.

    With w = theta and entries = Brownian increments, Pi(xi . grad u) equals
    the full noise sum sum_{k,i} theta_k DW^{k,i} Pi(sigma_{k,i} . grad u).
    """
    coeffs = np.einsum("n,ni,nid->nd", weights, entries, basis.vectors)
    return SpectralField(basis.lattice, coeffs)


@dataclass
class SolverConfig:
    """Time grid and scheme selection for the steppers."""

    dt: float
    T: float
    cutoff: int
    scheme: str = "ito_euler"
    save_every: int = 1
    energy_tolerance: float = 0.05

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.T < self.dt:
            raise ValueError(f"T must be >= dt, got T={self.T}, dt={self.dt}")
        if self.scheme not in ("ito_euler", "stratonovich_midpoint"):
            raise ValueError(f"unknown scheme {self.scheme!r}")

    @property
    def steps(self) -> int:
        return int(round(self.T / self.dt))


@dataclass
class GalerkinState:
    """One point of a Galerkin SDE path together with its model parameters."""

    u: SpectralField
    t: float
    gamma0: float
    kappa: float
    theta: ThetaCoefficients
    basis: NoiseBasis
    corrector: GalerkinCorrector = field(default=None, repr=False)

    def __post_init__(self):
        if self.corrector is None:
            self.corrector = galerkin_corrector(self.theta, self.kappa, self.u.cutoff)


@dataclass
class Trajectory:
    """Fields saved along a run; times[i] matches fields[i]."""

    times: np.ndarray
    fields: list
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.fields)


def _sde_noise_term(state: GalerkinState, u: SpectralField, entries) -> SpectralField:
    theta_vals = state.theta.values_on(state.basis.lattice)
    xi = noise_field(theta_vals, state.basis, entries)
    amp = np.sqrt(C_D[u.dim] * state.kappa)
    return amp * transport_term(xi, u, u.cutoff)


def step_sde(state: GalerkinState, cfg: SolverConfig, increments) -> GalerkinState:
    """Advance one step of the Galerkin SDE.

    ito_euler applies drift -b_N + S_{theta,N} explicitly and the diffusion
    with the Ito increment; stratonovich_midpoint solves the implicit
    midpoint rule on the Stratonovich form (no corrector drift).  Both
    preserve reality and divergence-freeness exactly.
    """
    u = state.u
    entries = getattr(increments, "entries", increments)
    if cfg.scheme == "ito_euler":
        # exponential Euler-Maruyama: exact flow of the stiff block-diagonal
        # corrector on the deterministic part, mild-solution phi-weight on
        # the Ito noise increment (stable at any dt)
        det = u - cfg.dt * galerkin_drift_b(u, state.gamma0, u.cutoff)
        noise = _sde_noise_term(state, u, entries)
        new_u = state.corrector.propagate(det, cfg.dt) + state.corrector.weight_noise(
            noise, cfg.dt
        )
    else:
        new_u = _midpoint_step(state, cfg, entries)
    return replace(state, u=new_u, t=state.t + cfg.dt)


def _midpoint_step(state: GalerkinState, cfg: SolverConfig, entries) -> SpectralField:
    """Implicit midpoint on the Stratonovich form.

    The noise transport L is linear and skew-adjoint, so the midpoint
    equation (I - L/2) u' = (I + L/2) u - dt b_N(half) is a well-conditioned
    linear system solved by GMRES; only the mild nonlinearity b_N needs the
    outer fixed-point loop.
    """
    from scipy.sparse.linalg import LinearOperator, gmres

    u = state.u
    lat = u.lattice
    theta_vals = state.theta.values_on(state.basis.lattice)
    xi = noise_field(theta_vals, state.basis, entries)
    amp = np.sqrt(C_D[u.dim] * state.kappa)

    def L(f: SpectralField) -> SpectralField:
        return amp * transport_term(xi, f, u.cutoff)

    shape = (lat.n, u.dim)

    def matvec(x):
        f = SpectralField(lat, x.reshape(shape).copy())
        return (f.coeffs - 0.5 * L(f).coeffs).ravel()

    A = LinearOperator((lat.n * u.dim,) * 2, matvec=matvec, dtype=np.complex128)
    base = u + 0.5 * L(u)
    new_u = u
    scale = max(np.max(np.abs(u.coeffs)), 1e-300)
    for _ in range(50):
        half = 0.5 * (u + new_u)
        rhs = base - cfg.dt * galerkin_drift_b(half, state.gamma0, u.cutoff)
        sol, info = gmres(
            A, rhs.coeffs.ravel(), x0=new_u.coeffs.ravel().copy(),
            rtol=1e-10, atol=1e-12 * scale, restart=300, maxiter=5,
        )
        if info != 0:
            raise RuntimeError(
                f"midpoint linear solve failed at t={state.t:.6g} (gmres info {info})"
            )
        # symmetrize to keep reality exact against solver round-off
        c = sol.reshape(shape)
        c = 0.5 * (c + np.conj(c[lat.conj_idx]))
        candidate = SpectralField(lat, c)
        gap = np.max(np.abs(candidate.coeffs - new_u.coeffs))
        new_u = candidate
        if gap <= 1e-10 * scale:
            return new_u
    raise RuntimeError(
        f"midpoint fixed point did not converge in 50 iterations at "
        f"t={state.t:.6g} (last update {gap:.3e}); reduce dt"
    )


def solve_sde(
    u0: SpectralField,
    theta: ThetaCoefficients,
    basis: NoiseBasis,
    gamma0: float,
    kappa: float,
    cfg: SolverConfig,
    increments_path: np.ndarray,
) -> Trajectory:
    """Run the Galerkin SDE over [0, T] with a pre-drawn increment path.

    increments_path has shape (steps, basis.lattice.n, d - 1); fields are
    saved every cfg.save_every steps (always including t = 0 and t = T).
    """
    steps = cfg.steps
    if increments_path.shape[0] < steps:
        raise ValueError(
            f"increment path has {increments_path.shape[0]} steps, need {steps}"
        )
    state = GalerkinState(u0.restrict(cfg.cutoff), 0.0, gamma0, kappa, theta, basis)
    e0 = np.linalg.norm(state.u.coeffs)
    times = [0.0]
    fields = [state.u]
    for n in range(steps):
        state = step_sde(state, cfg, increments_path[n])
        if np.linalg.norm(state.u.coeffs) > 2.0 * e0:
            raise RuntimeError(
                f"SDE blow-up guard tripped at t={state.t:.6g}: "
                f"|u| = {np.linalg.norm(state.u.coeffs):.3e} > 2 |u0|"
            )
        if (n + 1) % cfg.save_every == 0 or n == steps - 1:
            times.append(state.t)
            fields.append(state.u)
    return Trajectory(np.array(times), fields, {"scheme": cfg.scheme, "dt": cfg.dt})


def solve_viscous_leray(
    u0: SpectralField, gamma0: float, kappa: float, cfg: SolverConfig
) -> Trajectory:
    """Deterministic viscous solver via integrating-factor Euler:
    u <- P_dt(u - dt Pi(v . grad u)), P the heat flow at mu = C'_d kappa."""
    u = u0.restrict(cfg.cutoff)
    mu = C_D_PRIME[u.dim] * kappa
    e0 = np.linalg.norm(u.coeffs)
    times = [0.0]
    fields = [u]
    for n in range(cfg.steps):
        adv = transport_term(smoothing_k(u, gamma0), u, cfg.cutoff)
        u = heat_semigroup(u - cfg.dt * adv, cfg.dt, mu)
        if np.linalg.norm(u.coeffs) > 2.0 * e0:
            raise RuntimeError(
                f"viscous solver blow-up guard tripped at t={(n + 1) * cfg.dt:.6g}: "
                f"|u| = {np.linalg.norm(u.coeffs):.3e} > 2 |u0| = {2 * e0:.3e}"
            )
        if (n + 1) % cfg.save_every == 0 or n == cfg.steps - 1:
            times.append((n + 1) * cfg.dt)
            fields.append(u)
    return Trajectory(np.array(times), fields, {"dt": cfg.dt, "mu": mu})


def solve_viscous_dense(
    u0: SpectralField, gamma0: float, kappa: float, cfg: SolverConfig
) -> list:
    """Viscous solution at every step time (0 .. steps), for driving the
    fluctuation-limit equation on the same grid."""
    dense_cfg = replace(cfg, save_every=1)
    traj = solve_viscous_leray(u0, gamma0, kappa, dense_cfg)
    return traj.fields


def solve_clt_limit(
    u_tilde_steps: list,
    gamma: float,
    gamma0: float,
    basis: NoiseBasis,
    kappa: float,
    cfg: SolverConfig,
    increments_path: np.ndarray,
) -> Trajectory:
    """Linear fluctuation-limit SPDE driven by the deterministic solution.

    dU + Pi(V . grad u~ + v~ . grad U) dt = C'_d kappa Delta U dt
      + sqrt(C_d kappa) sum_{k,i} |k|^(-gamma) Pi(sigma_{k,i} . grad u~) dW,
    U(0) = 0, V = K(U); integrating-factor Euler on the same time grid and
    Brownian path as the Galerkin runs (noise summed over the basis ball).
    """
    steps = cfg.steps
    if len(u_tilde_steps) < steps + 1:
        raise ValueError(
            f"need the driving solution at all {steps + 1} grid times, "
            f"got {len(u_tilde_steps)}"
        )
    if increments_path.shape[0] < steps:
        raise ValueError("increment path shorter than the time grid")
    dim = basis.dim
    mu = C_D_PRIME[dim] * kappa
    amp = np.sqrt(C_D[dim] * kappa)
    weights = basis.lattice.norm ** (-gamma)
    U = SpectralField.zero(dim, cfg.cutoff)
    times = [0.0]
    fields = [U]
    for n in range(steps):
        ut = u_tilde_steps[n].restrict(cfg.cutoff)
        drift = transport_term(smoothing_k(U, gamma0), ut, cfg.cutoff) + transport_term(
            smoothing_k(ut, gamma0), U, cfg.cutoff
        )
        eta = noise_field(weights, basis, increments_path[n])
        forcing = amp * transport_term(eta, ut, cfg.cutoff)
        # Mild-solution noise weight phi(2 dt mu Delta)^(1/2), matching the
        # exponential-Euler weighting of the Galerkin stepper so the coupled
        # difference U^N - U is not polluted by an O(dt |Delta|) amplitude
        # mismatch between the two discretisations.
        x = -2.0 * cfg.dt * mu * (TWO_PI**2) * U.lattice.norm2
        psi = np.sqrt(np.where(x < 0, np.expm1(x) / np.where(x < 0, x, 1.0), 1.0))
        forcing = forcing.with_coeffs(forcing.coeffs * psi[:, None])
        U = heat_semigroup(U - cfg.dt * drift, cfg.dt, mu) + forcing
        if (n + 1) % cfg.save_every == 0 or n == steps - 1:
            times.append((n + 1) * cfg.dt)
            fields.append(U)
    return Trajectory(np.array(times), fields, {"dt": cfg.dt, "gamma": gamma})


def fluctuation(
    u_n: SpectralField, u_tilde: SpectralField, epsilon_n: float
) -> SpectralField:
    """Rescaled deviation (u^N - u~) / sqrt(epsilon_N)."""
    if (u_n.dim, u_n.cutoff) != (u_tilde.dim, u_tilde.cutoff):
        raise ValueError(
            f"cutoff mismatch: ({u_n.dim},{u_n.cutoff}) vs "
            f"({u_tilde.dim},{u_tilde.cutoff})"
        )
    return (u_n - u_tilde) * (1.0 / np.sqrt(epsilon_n))
