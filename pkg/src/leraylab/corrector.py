"""Stratonovich-Ito corrector: literal double transport sum, closed-form
Fourier multiplier, limit constants and convergence-factor diagnostics.

The corrector acts block-diagonally over modes l.  Expressed in the
orthonormal frame {a[l, j]} of l-perp, the untruncated operator is

    S(v)|_l = (-4 pi^2 kappa |l|^2 Id + M_l) (v_{l,j})_j,

where M_l is the symmetric matrix with entries
4 pi^2 C_d kappa |l|^2 * sum_k theta_k^2 sin^2(angle(k,l))
(a[l,i].(k-l))(a[l,j].(k-l)) / |k-l|^2.  As the noise spreads, M_l tends to
4 pi^2 C_d kappa |l|^2 times 4/15 (3D) resp. 3/8 (2D) on the diagonal, so S
tends to C'_d kappa Delta with C'_2 = 1/4 and C'_3 = 3/5.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from numba import njit, prange

from .noise import ThetaCoefficients, decreasing_factor, theta_coeffs
from .spectral import (
    TWO_PI,
    Lattice,
    NoiseBasis,
    SpectralField,
    lattice,
    leray_project,
    make_noise_basis,
)

#: Normalizing constant C_d = d / (d - 1) of the noise.
C_D = {2: 2.0, 3: 1.5}

#: Effective viscosity constant C'_d of the corrector limit.
C_D_PRIME = {2: 0.25, 3: 0.6}

#: Limit of the bracketed k-sum on the diagonal.
LIMIT_CONSTANT = {2: 3.0 / 8.0, 3: 4.0 / 15.0}


def corrector_direct(
    u: SpectralField, theta: ThetaCoefficients, basis: NoiseBasis, kappa: float
) -> SpectralField:
    """Literal evaluation C_d kappa sum_{k,i} theta_k^2 Pi[s_{k,i}.grad
    Pi(s_{-k,i}.grad u)], exact over the truncated supports.

    The inner transport shifts modes by -k and the outer by +k, so the result
    has the same support as u; intermediate modes are handled explicitly.
    """
    if not u.is_divergence_free(1e-10):
        raise ValueError("corrector_direct requires a divergence-free field")
    lat = u.lattice
    nlat = basis.lattice
    theta2 = theta.squares_on(nlat)
    modes = lat.modes.astype(float)
    out = np.zeros_like(u.coeffs)
    for row in np.nonzero(theta2 > 0)[0]:
        k = nlat.modes[row]
        w = theta2[row]
        for i in range(lat.dim - 1):
            a = basis.vectors[row, i]
            # inner transport s_{-k,i}.grad u: mode m -> m - k
            inner_factor = TWO_PI * 1j * (modes @ a)
            mm = modes - k
            mm_norm2 = np.sum(mm * mm, axis=1)
            valid = mm_norm2 > 0
            c = inner_factor[:, None] * u.coeffs
            # Leray projection at the shifted mode
            dots = np.where(valid, np.sum(mm * c, axis=1), 0.0)
            c = np.where(
                valid[:, None],
                c - (dots / np.where(valid, mm_norm2, 1.0))[:, None] * mm,
                0.0,
            )
            # outer transport s_{k,i}.grad: back to mode m
            outer_factor = TWO_PI * 1j * (mm @ a)
            out += w * outer_factor[:, None] * c
    result = u.with_coeffs(C_D[lat.dim] * kappa * out)
    return leray_project(result)


def bracket_sum(theta: ThetaCoefficients, basis: NoiseBasis, l) -> np.ndarray:
    """The (d-1)x(d-1) matrix sum_k theta_k^2 sin^2(angle(k,l))
    (a[l,i].(k-l))(a[l,j].(k-l)) / |k-l|^2 over the noise support."""
    nlat = basis.lattice
    l = np.asarray(l, dtype=float)
    if not nlat.contains(l):
        raise ValueError(f"mode {l.tolist()} outside basis range {nlat.cutoff}")
    frame = basis.vectors[nlat.index(l)]  # (d-1, d)
    theta2 = theta.squares_on(nlat)
    k = nlat.modes.astype(float)
    m = k - l
    m_norm2 = np.sum(m * m, axis=1)
    valid = (theta2 > 0) & (m_norm2 > 0)
    # sin^2 via 1 - (k.l)^2/(|k|^2 |l|^2): no trig, exact 0 at k // l
    sin2 = 1.0 - (k @ l) ** 2 / (nlat.norm2 * float(l @ l))
    w = np.where(valid, theta2 * sin2 / np.where(valid, m_norm2, 1.0), 0.0)
    proj = frame @ m.T  # (d-1, n): a[l,i].(k-l)
    return np.einsum("k,ik,jk->ij", w, proj, proj)


def corrector_limit_error(theta: ThetaCoefficients, basis: NoiseBasis, l) -> np.ndarray:
    """Residual of the bracketed sum against its limit matrix
    (4/15 Id in 3D, 3/8 in 2D)."""
    dim = basis.dim
    return bracket_sum(theta, basis, l) - LIMIT_CONSTANT[dim] * np.eye(dim - 1)


def shift_residual(theta: ThetaCoefficients, basis: NoiseBasis, l) -> np.ndarray:
    """Matrix of sums of sin^2-weighted differences between the shifted and
    unshifted direction factors; bounded entrywise by 4 |l| D_N."""
    nlat = basis.lattice
    l = np.asarray(l, dtype=float)
    frame = basis.vectors[nlat.index(l)]
    theta2 = theta.squares_on(nlat)
    k = nlat.modes.astype(float)
    m = k - l
    m_norm2 = np.sum(m * m, axis=1)
    valid = (theta2 > 0) & (m_norm2 > 0)
    sin2 = 1.0 - (k @ l) ** 2 / (nlat.norm2 * float(l @ l))
    w = np.where(valid, theta2 * sin2, 0.0)
    proj_m = frame @ m.T
    proj_k = frame @ k.T
    shifted = np.einsum(
        "k,ik,jk->ij", w / np.where(valid, m_norm2, 1.0), proj_m, proj_m
    )
    unshifted = np.einsum("k,ik,jk->ij", w / nlat.norm2, proj_k, proj_k)
    return shifted - unshifted


def unshifted_sum(theta: ThetaCoefficients, basis: NoiseBasis, l) -> np.ndarray:
    """sum_k theta_k^2 sin^2(angle(k,l)) (a[l,i].k)(a[l,j].k)/|k|^2."""
    nlat = basis.lattice
    l = np.asarray(l, dtype=float)
    frame = basis.vectors[nlat.index(l)]
    theta2 = theta.squares_on(nlat)
    k = nlat.modes.astype(float)
    sin2 = 1.0 - (k @ l) ** 2 / (nlat.norm2 * float(l @ l))
    proj_k = frame @ k.T
    return np.einsum("k,ik,jk->ij", theta2 * sin2 / nlat.norm2, proj_k, proj_k)


def j_integral(dim: int, gamma: float, N: float) -> float:
    """Closed-form radial integral approximating the unshifted sum.

    3D: (16 pi / 15) eps_N int_1^N r^(2 - 2 gamma) dr (diagonal entries);
    2D: (3 pi / 4) eps_N int_1^N r^(1 - 2 gamma) dr.  The normalization
    eps_N uses the lattice ball of radius floor(N).
    """
    if N < 1:
        raise ValueError(f"N must be >= 1, got {N}")
    theta = theta_coeffs(dim, gamma, int(np.floor(N)))
    exponent = (dim - 1.0) - 2.0 * gamma
    if abs(exponent + 1.0) < 1e-14:
        integral = float(np.log(N))
    else:
        integral = (N ** (exponent + 1.0) - 1.0) / (exponent + 1.0)
    prefactor = 16.0 * np.pi / 15.0 if dim == 3 else 3.0 * np.pi / 4.0
    return prefactor * theta.epsilon * integral


@njit(parallel=True, cache=True)
def _bracket_kernel(l_modes, frames, k_modes, k_norm2, theta2):  # pragma: no cover
    n_l, d = l_modes.shape
    n_k = k_modes.shape[0]
    out = np.zeros((n_l, d - 1, d - 1))
    for a in prange(n_l):
        l2 = 0.0
        for c in range(d):
            l2 += l_modes[a, c] * l_modes[a, c]
        proj = np.empty(d - 1)
        for t in range(n_k):
            if theta2[t] == 0.0:
                continue
            kl = 0.0
            m2 = 0.0
            for c in range(d):
                kl += k_modes[t, c] * l_modes[a, c]
                mc = k_modes[t, c] - l_modes[a, c]
                m2 += mc * mc
            if m2 == 0.0:
                continue
            sin2 = 1.0 - kl * kl / (k_norm2[t] * l2)
            w = theta2[t] * sin2 / m2
            for i in range(d - 1):
                p = 0.0
                for c in range(d):
                    p += frames[a, i, c] * (k_modes[t, c] - l_modes[a, c])
                proj[i] = p
            for i in range(d - 1):
                for j in range(d - 1):
                    out[a, i, j] += w * proj[i] * proj[j]
    return out


def _spectral_norms(blocks: np.ndarray) -> np.ndarray:
    """Spectral norms of a stack of symmetric 1x1 or 2x2 matrices."""
    if blocks.shape[-1] == 1:
        return np.abs(blocks[:, 0, 0])
    mean = 0.5 * (blocks[:, 0, 0] + blocks[:, 1, 1])
    rad = np.sqrt(0.25 * (blocks[:, 0, 0] - blocks[:, 1, 1]) ** 2 + blocks[:, 0, 1] ** 2)
    return np.maximum(np.abs(mean + rad), np.abs(mean - rad))


@dataclass
class CorrectorMultiplier:
    """Block-diagonal form of the untruncated corrector over a mode lattice.

    blocks[row] is M_l at lattice.modes[row]; the full operator at l in the
    frame of l-perp is (-4 pi^2 kappa |l|^2 Id + M_l).
    """

    lattice: Lattice
    basis: NoiseBasis
    kappa: float
    blocks: np.ndarray = field(repr=False)  # (n, d-1, d-1)

    @property
    def dim(self) -> int:
        return self.lattice.dim

    def s_frame(self, row: int) -> np.ndarray:
        """Frame matrix of S at lattice.modes[row]."""
        l2 = self.lattice.norm2[row]
        lap = -4.0 * np.pi**2 * self.kappa * l2
        return lap * np.eye(self.dim - 1) + self.blocks[row]

    def deviation_frame(self, row: int) -> np.ndarray:
        """Frame matrix of S - C'_d kappa Delta at lattice.modes[row]."""
        l2 = self.lattice.norm2[row]
        shift = -4.0 * np.pi**2 * self.kappa * l2 * (1.0 - C_D_PRIME[self.dim])
        return shift * np.eye(self.dim - 1) + self.blocks[row]

    def _deviation_blocks(self) -> np.ndarray:
        shift = -4.0 * np.pi**2 * self.kappa * self.lattice.norm2
        shift = shift * (1.0 - C_D_PRIME[self.dim])
        dev = self.blocks.copy()
        idx = np.arange(self.dim - 1)
        dev[:, idx, idx] += shift[:, None]
        return dev

    def _frames(self) -> np.ndarray:
        rows = [self.basis.lattice.index(k) for k in self.lattice.modes]
        return self.basis.vectors[rows]  # (n, d-1, d)

    def apply(self, v: SpectralField, deviation: bool = False) -> SpectralField:
        """Evaluate S(v), or (S - C'_d kappa Delta)(v) if deviation is set."""
        if v.lattice is not self.lattice and (v.dim, v.cutoff) != (
            self.lattice.dim,
            self.lattice.cutoff,
        ):
            raise ValueError("field lattice does not match multiplier lattice")
        if not v.is_divergence_free(1e-10):
            raise ValueError("corrector multiplier requires a divergence-free field")
        frames = self._frames()
        coords = np.einsum("njd,nd->nj", frames, v.coeffs)
        lap = -4.0 * np.pi**2 * self.kappa * self.lattice.norm2
        if deviation:
            lap = lap * (1.0 - C_D_PRIME[self.dim])
        out = lap[:, None] * coords + np.einsum("nij,nj->ni", self.blocks, coords)
        return v.with_coeffs(np.einsum("nj,njd->nd", out, frames))

    def operator_norm(self, alpha: float) -> float:
        """Exact H^b -> H^(b-2-alpha) norm of S - C'_d kappa Delta over the
        truncated range: sup_l (2 pi |l|)^(-2-alpha) * ||block||_2."""
        if not 0 <= alpha <= 1:
            raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
        weights = (TWO_PI * self.lattice.norm) ** (-2.0 - alpha)
        return float(np.max(weights * _spectral_norms(self._deviation_blocks())))

    def max_eigenvalue(self) -> float:
        """Largest eigenvalue over all S blocks (<= 0: S is dissipative)."""
        lap = -4.0 * np.pi**2 * self.kappa * self.lattice.norm2
        s = self.blocks.copy()
        idx = np.arange(self.dim - 1)
        s[:, idx, idx] += lap[:, None]
        if self.dim == 2:
            return float(np.max(s[:, 0, 0]))
        mean = 0.5 * (s[:, 0, 0] + s[:, 1, 1])
        rad = np.sqrt(0.25 * (s[:, 0, 0] - s[:, 1, 1]) ** 2 + s[:, 0, 1] ** 2)
        return float(np.max(mean + rad))


def corrector_multiplier(
    theta: ThetaCoefficients,
    basis: NoiseBasis,
    kappa: float,
    modes: Lattice,
) -> CorrectorMultiplier:
    """Precompute the frame blocks M_l for every mode of `modes`."""
    if modes.cutoff > basis.max_mode:
        raise ValueError(
            f"mode range {modes.cutoff} exceeds basis range {basis.max_mode}"
        )
    dim = modes.dim
    nlat = lattice(dim, theta.N)
    frames = basis.vectors[[basis.lattice.index(k) for k in modes.modes]]
    raw = _bracket_kernel(
        modes.modes.astype(float),
        frames,
        nlat.modes.astype(float),
        nlat.norm2,
        theta.squares_on(nlat),
    )
    pref = 4.0 * np.pi**2 * C_D[dim] * kappa
    blocks = pref * modes.norm2[:, None, None] * raw
    return CorrectorMultiplier(modes, basis, kappa, blocks)


def verify_corrector_rate(
    theta: ThetaCoefficients,
    basis: NoiseBasis,
    kappa: float,
    alpha: float,
    mode_range: int,
) -> dict:
    """Operator norm of S - C'_d kappa Delta (H^b -> H^(b-2-alpha)) over the
    truncated range, divided by kappa D_N^alpha.

    The norm does not depend on b, only on the weight gap 2 + alpha.
    """
    if not 0 <= alpha <= 1:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    modes = lattice(theta.dim, mode_range)
    mult = corrector_multiplier(theta, basis, kappa, modes)
    op_norm = mult.operator_norm(alpha)
    dn = decreasing_factor(theta)
    return {
        "dim": theta.dim,
        "gamma": theta.gamma,
        "N": theta.N,
        "alpha": alpha,
        "D_N": dn,
        "op_norm": op_norm,
        "ratio": op_norm / (kappa * dn**alpha),
    }


def corrector_check_rows(
    dim: int,
    gamma: float,
    kappa: float,
    alphas,
    n_sweep,
    mode_range: int | None = None,
    b: float = 0.0,
) -> list[dict]:
    """Sweep the rate check over N and alpha; one report row per pair.

    When mode_range is None, the range is enlarged geometrically until the
    operator norm changes by < 1% for every alpha (the sup over all modes is
    dominated by moderate |l|; the growth is capped at 4x the largest N).
    """
    n_sweep = list(n_sweep)
    alphas = list(alphas)
    # 3D lattice balls grow cubically; cap the sup range where index tables
    # stay cheap (the sup is attained well below the cap in practice).
    cap = 4 * max(n_sweep) if dim == 2 else min(4 * max(n_sweep), 40)
    rows = []
    for n in n_sweep:
        theta = theta_coeffs(dim, gamma, n)
        if mode_range is not None:
            ranges = [mode_range]
        elif dim == 2:
            ranges = [cap]
        else:
            ranges = []
            r = max(8, n)
            while r < cap:
                ranges.append(r)
                r = int(np.ceil(1.5 * r))
            ranges.append(cap)
        prev = None
        for r in ranges:
            basis = make_noise_basis(dim, r)
            mult = corrector_multiplier(theta, basis, kappa, lattice(dim, r))
            norms = {a: mult.operator_norm(a) for a in alphas}
            converged = prev is not None and all(
                norms[a] <= prev[a] * 1.01 for a in alphas
            )
            prev = norms
            used_range = r
            if converged:
                break
        dn = decreasing_factor(theta)
        for a in alphas:
            rows.append(
                {
                    "dim": dim,
                    "gamma": gamma,
                    "N": n,
                    "alpha": a,
                    "b": b,
                    "mode_range": used_range,
                    "D_N": dn,
                    "op_norm": prev[a],
                    "ratio": prev[a] / (kappa * dn**a),
                }
            )
    return rows


@dataclass
class GalerkinCorrector:
    """Truncation-aware corrector S_{theta,N} of the Galerkin system.

    Identical to the untruncated multiplier except that intermediate modes
    l - k falling outside the Galerkin ball are dropped, matching the literal
    triple-projection composition.  mats[row] is a d x d real matrix acting
    on u_hat[l]; the Leray projection at l is applied afterwards.
    """

    lattice: Lattice
    kappa: float
    mats: np.ndarray = field(repr=False)  # (n, d, d)
    _propagators: dict = field(default_factory=dict, repr=False)

    def apply(self, u: SpectralField) -> SpectralField:
        out = np.einsum("nij,nj->ni", self.kappa * self.mats, u.coeffs)
        return leray_project(u.with_coeffs(out))

    def frame_blocks(self) -> np.ndarray:
        """kappa S expressed in the l-perp frames: symmetric negative
        semidefinite (d-1) x (d-1) blocks, one per mode."""
        frames = make_noise_basis(self.lattice.dim, self.lattice.cutoff).vectors
        blocks = np.einsum("nid,nde,nje->nij", frames, self.kappa * self.mats, frames)
        return 0.5 * (blocks + np.swapaxes(blocks, 1, 2))

    def _frame_mats(self, dt: float):
        """exp(dt B) and the noise weight phi(2 dt B)^(1/2) per mode, where
        phi(x) = (e^x - 1)/x matches the mild-solution noise variance."""
        cached = self._propagators.get(dt)
        if cached is None:
            w, V = np.linalg.eigh(self.frame_blocks())
            E = np.einsum("nij,nj,nkj->nik", V, np.exp(dt * w), V)
            x = 2.0 * dt * w
            phi = np.where(np.abs(x) > 1e-12, np.expm1(x) / np.where(x == 0, 1, x), 1.0)
            Psi = np.einsum("nij,nj,nkj->nik", V, np.sqrt(phi), V)
            cached = (E, Psi)
            self._propagators[dt] = cached
        return cached

    def _frame_apply(self, mats: np.ndarray, u: SpectralField) -> SpectralField:
        frames = make_noise_basis(self.lattice.dim, self.lattice.cutoff).vectors
        coords = np.einsum("njd,nd->nj", frames, u.coeffs)
        return u.with_coeffs(
            np.einsum("nj,njd->nd", np.einsum("nij,nj->ni", mats, coords), frames)
        )

    def propagate(self, u: SpectralField, dt: float) -> SpectralField:
        """Exact flow exp(dt S) u, per-mode matrix exponential in the frame.

        S is block-diagonal and <= 0, so this is an unconditionally stable
        contraction; it replaces the explicit corrector-drift step which is
        unstable for dt * |l|^2 large near the Galerkin cutoff.
        """
        return self._frame_apply(self._frame_mats(dt)[0], u)

    def weight_noise(self, n: SpectralField, dt: float) -> SpectralField:
        """Apply phi(2 dt S)^(1/2) to one noise increment, the exponential
        Euler-Maruyama weight that keeps the discrete energy balance."""
        return self._frame_apply(self._frame_mats(dt)[1], n)


@lru_cache(maxsize=16)
def _galerkin_mats(dim: int, gamma: float, N: int, cutoff: int):
    lat = lattice(dim, cutoff)
    theta = theta_coeffs(dim, gamma, N)
    nlat = lattice(dim, min(N, cutoff))
    theta2 = theta.squares_on(nlat)
    k = nlat.modes.astype(float)
    mats = np.zeros((lat.n, dim, dim))
    pref = -4.0 * np.pi**2 * C_D[dim]
    eye = np.eye(dim)
    for row in range(lat.n):
        l = lat.modes[row].astype(float)
        m = l - k
        m_norm2 = np.sum(m * m, axis=1)
        # keep only intermediate modes inside the Galerkin ball (and nonzero)
        valid = (m_norm2 > 0) & (m_norm2 <= cutoff * cutoff)
        sin2 = 1.0 - (k @ l) ** 2 / (nlat.norm2 * float(l @ l))
        w = np.where(valid, theta2 * sin2, 0.0)
        pp = np.einsum("k,ka,kb->ab", w / np.where(valid, m_norm2, 1.0), m, m)
        mats[row] = pref * float(l @ l) * (float(np.sum(w)) * eye - pp)
    mats.flags.writeable = False
    return lat, mats


def galerkin_corrector(
    theta: ThetaCoefficients, kappa: float, cutoff: int
) -> GalerkinCorrector:
    """Corrector drift of the Galerkin SDE at noise cutoff theta.N and
    Galerkin cutoff `cutoff`; blocks are cached per (dim, gamma, N, cutoff)."""
    lat, mats = _galerkin_mats(theta.dim, theta.gamma, theta.N, cutoff)
    return GalerkinCorrector(lat, kappa, mats)


def galerkin_corrector_literal(
    u: SpectralField, theta: ThetaCoefficients, basis: NoiseBasis, kappa: float
) -> SpectralField:
    """Reference triple-projection form: the diffusion fields composed at k
    and -k, summed with weights C_d kappa theta_k^2.

    Oracle for galerkin_corrector; quadratic cost, small cutoffs only.
    """
    from .dynamics import galerkin_diffusion_g

    lat = u.lattice
    nlat = basis.lattice
    theta2 = theta.squares_on(nlat)
    acc = np.zeros_like(u.coeffs)
    for row in np.nonzero(theta2 > 0)[0]:
        k = nlat.modes[row]
        for i in range(lat.dim - 1):
            inner = galerkin_diffusion_g(u, tuple(-k), i, basis, lat.cutoff)
            outer = galerkin_diffusion_g(inner, tuple(k), i, basis, lat.cutoff)
            acc += theta2[row] * outer.coeffs
    return u.with_coeffs(C_D[lat.dim] * kappa * acc)
