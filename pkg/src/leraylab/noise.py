"""Radial noise coefficients theta^N, the decreasing factor D_N, and
reproducible sampling of the complex Brownian increment family."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .spectral import Lattice, NoiseBasis, lattice


@lru_cache(maxsize=None)
def shell_counts(dim: int, max_mode: int):
    """(|k|^2 values, multiplicities) for the ball {1 <= |k| <= max_mode}."""
    lat = lattice(dim, max_mode)
    values, counts = np.unique(lat.norm2.astype(int), return_counts=True)
    return values, counts


@dataclass(frozen=True)
class ThetaCoefficients:
    """theta^N_k = sqrt(epsilon_N) / |k|^gamma on 1 <= |k| <= N, zero beyond.

    epsilon_N normalizes sum_k theta_k^2 = 1.
    """

    dim: int
    gamma: float
    N: int
    epsilon: float = field(init=False)

    def __post_init__(self):
        if not 0 < self.gamma < self.dim / 2:
            raise ValueError(
                f"gamma must lie in (0, d/2) = (0, {self.dim / 2}), got {self.gamma}"
            )
        if self.N < 1:
            raise ValueError(f"N must be >= 1, got {self.N}")
        values, counts = shell_counts(self.dim, self.N)
        total = float(np.sum(counts * np.asarray(values, dtype=float) ** (-self.gamma)))
        object.__setattr__(self, "epsilon", 1.0 / total)

    def values_on(self, lat: Lattice) -> np.ndarray:
        """Per-mode theta values for a lattice (zero where |k| > N)."""
        theta = np.zeros(lat.n)
        active = lat.norm2 <= self.N * self.N
        theta[active] = np.sqrt(self.epsilon) / lat.norm[active] ** self.gamma
        return theta

    def squares_on(self, lat: Lattice) -> np.ndarray:
        theta2 = np.zeros(lat.n)
        active = lat.norm2 <= self.N * self.N
        theta2[active] = self.epsilon / lat.norm2[active] ** self.gamma
        return theta2


def theta_coeffs(dim: int, gamma: float, N: int) -> ThetaCoefficients:
    return ThetaCoefficients(dim, gamma, N)


def decreasing_factor(theta: ThetaCoefficients) -> float:
    """D_N = epsilon_N * sum_{1 <= |k| <= N} |k|^(-(2 gamma + 1)), exact."""
    values, counts = shell_counts(theta.dim, theta.N)
    s = float(
        np.sum(counts * np.asarray(values, dtype=float) ** (-(theta.gamma + 0.5)))
    )
    return theta.epsilon * s


def check_dn_epsilon_bound(theta: ThetaCoefficients, q: float) -> float:
    """Ratio D_N / epsilon_N^q; q must lie in (0, 1 ^ 1/(d - 2 gamma))."""
    upper = min(1.0, 1.0 / (theta.dim - 2.0 * theta.gamma))
    if not 0 < q < upper:
        raise ValueError(
            f"q must lie in (0, min(1, 1/(d-2*gamma))) = (0, {upper}), got {q}"
        )
    return decreasing_factor(theta) / theta.epsilon**q


def stream(master_seed: int, *path: int) -> np.random.Generator:
    """Counter-based RNG stream keyed by (master seed, path...).

    Distinct paths give statistically independent streams; the mapping is
    deterministic regardless of scheduling order.
    """
    ss = np.random.SeedSequence(
        entropy=int(master_seed), spawn_key=tuple(int(p) for p in path)
    )
    return np.random.Generator(np.random.Philox(ss))


@dataclass
class BrownianIncrements:
    """One time step of the complex family {Delta W^{k,i}} on a lattice ball.

    entries[row, i] is Delta W at basis.lattice.modes[row]; entries at -k are
    the conjugates of those at k, and E|Delta W|^2 = 2 dt (each real component
    has variance dt, forced by the quadratic covariation 2t).
    """

    basis: NoiseBasis
    dt: float
    entries: np.ndarray = field(repr=False)

    def at(self, k, i: int) -> complex:
        return complex(self.entries[self.basis.lattice.index(k), i])


def sample_increments(
    basis: NoiseBasis, dt: float, rng: np.random.Generator
) -> BrownianIncrements:
    """Draw one step of increments; conjugation at -k holds by construction."""
    entries = gaussian_path(basis, dt, rng, steps=1)[0]
    return BrownianIncrements(basis, dt, entries)


def increments_for(
    basis: NoiseBasis, dt: float, seed: int, sample: int, step: int
) -> BrownianIncrements:
    """Increments at a fixed (seed, sample, step) triple, bit-reproducible."""
    return sample_increments(basis, dt, stream(seed, sample, step))


def gaussian_path(
    basis: NoiseBasis, dt: float, rng: np.random.Generator, steps: int
) -> np.ndarray:
    """(steps, n_modes, dim-1) complex array of increments for `steps` steps.

    Canonical half-lattice rows are drawn in lattice order; the -k rows are
    filled with conjugates.
    """
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    lat = basis.lattice
    canon = np.nonzero(lat.canonical)[0]
    g = rng.normal(0.0, np.sqrt(dt), size=(steps, len(canon), lat.dim - 1, 2))
    out = np.zeros((steps, lat.n, lat.dim - 1), dtype=np.complex128)
    out[:, canon] = g[..., 0] + 1j * g[..., 1]
    out[:, lat.conj_idx[canon]] = np.conj(out[:, canon])
    return out
