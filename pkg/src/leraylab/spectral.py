"""Fourier-lattice fields on the torus: norms, projections, smoothing, heat flow.

All fields live on the lattice ball {k in Z^d : 1 <= |k| <= M} with the zero
mode excluded (zero spatial mean).  Coefficients are stored densely for the
whole ball, with both k and -k present; real-valued fields satisfy
conj(u_hat[k]) = u_hat[-k].  The Laplacian convention is
Delta e_k = -4 pi^2 |k|^2 e_k, matching the H^s weight (2 pi |k|)^(2s).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

TWO_PI = 2.0 * np.pi


@lru_cache(maxsize=None)
def lattice(dim: int, cutoff: int) -> "Lattice":
    """Shared lattice instance for (dim, cutoff); construction is cached."""
    return Lattice(dim, cutoff)


class Lattice:
    """The mode set {1 <= |k| <= M} of Z^d with index machinery.

    Attributes:
        modes: (n, d) int array, lexicographically sorted.
        conj_idx: row index of -k for each row.
        canonical: boolean mask selecting one representative of each {k, -k}
            pair (first nonzero component positive).
    """

    def __init__(self, dim: int, cutoff: int):
        if dim not in (2, 3):
            raise ValueError(f"dim must be 2 or 3, got {dim}")
        if cutoff < 1:
            raise ValueError(f"cutoff must be >= 1, got {cutoff}")
        self.dim = dim
        self.cutoff = cutoff

        rng1d = np.arange(-cutoff, cutoff + 1)
        grids = np.meshgrid(*([rng1d] * dim), indexing="ij")
        cube = np.stack([g.ravel() for g in grids], axis=-1)
        norm2 = np.sum(cube * cube, axis=1)
        keep = (norm2 >= 1) & (norm2 <= cutoff * cutoff)
        modes = cube[keep]
        order = np.lexsort(modes.T[::-1])
        self.modes = np.ascontiguousarray(modes[order])
        self.n = len(self.modes)

        self._index = {tuple(int(c) for c in k): i for i, k in enumerate(self.modes)}
        self.conj_idx = np.array(
            [self._index[tuple(int(-c) for c in k)] for k in self.modes]
        )
        self.norm2 = np.sum(self.modes * self.modes, axis=1).astype(float)
        self.norm = np.sqrt(self.norm2)

        # canonical representative: first nonzero component positive
        canon = np.zeros(self.n, dtype=bool)
        for i, k in enumerate(self.modes):
            for c in k:
                if c != 0:
                    canon[i] = c > 0
                    break
        self.canonical = canon

    def index(self, k) -> int:
        """Row of mode k; raises KeyError if k is outside the ball."""
        return self._index[tuple(int(c) for c in k)]

    def contains(self, k) -> bool:
        return tuple(int(c) for c in k) in self._index

    def __reduce__(self):
        return (lattice, (self.dim, self.cutoff))


@dataclass
class SpectralField:
    """Truncated Fourier representation of a mean-zero vector field.

    `coeffs` has shape (lattice.n, dim); row i is u_hat at lattice.modes[i].
    Treated as immutable: the coefficient array is locked after construction.
    """

    lattice: Lattice
    coeffs: np.ndarray = field(repr=False)

    def __post_init__(self):
        expected = (self.lattice.n, self.lattice.dim)
        if self.coeffs.shape != expected:
            raise ValueError(f"coeffs shape {self.coeffs.shape}, expected {expected}")
        self.coeffs = np.ascontiguousarray(self.coeffs, dtype=np.complex128)
        self.coeffs.flags.writeable = False

    @property
    def dim(self) -> int:
        return self.lattice.dim

    @property
    def cutoff(self) -> int:
        return self.lattice.cutoff

    @classmethod
    def zero(cls, dim: int, cutoff: int) -> "SpectralField":
        lat = lattice(dim, cutoff)
        return cls(lat, np.zeros((lat.n, dim), dtype=np.complex128))

    @classmethod
    def from_modes(cls, dim: int, cutoff: int, entries: dict) -> "SpectralField":
        """Build from a {mode tuple: coefficient vector} mapping."""
        lat = lattice(dim, cutoff)
        coeffs = np.zeros((lat.n, dim), dtype=np.complex128)
        for k, v in entries.items():
            coeffs[lat.index(k)] = np.asarray(v, dtype=np.complex128)
        return cls(lat, coeffs)

    def with_coeffs(self, coeffs: np.ndarray) -> "SpectralField":
        return SpectralField(self.lattice, coeffs)

    def at(self, k) -> np.ndarray:
        return self.coeffs[self.lattice.index(k)]

    def is_real(self, tol: float = 1e-12) -> bool:
        """Reality: conj(u_hat[k]) == u_hat[-k] within tol (absolute)."""
        diff = np.conj(self.coeffs) - self.coeffs[self.lattice.conj_idx]
        return bool(np.max(np.abs(diff), initial=0.0) <= tol)

    def is_divergence_free(self, rel_tol: float = 1e-12) -> bool:
        dots = np.abs(np.sum(self.lattice.modes * self.coeffs, axis=1))
        scale = self.lattice.norm * np.linalg.norm(self.coeffs, axis=1)
        return bool(np.all(dots <= rel_tol * np.maximum(scale, 1e-300)))

    def restrict(self, cutoff: int) -> "SpectralField":
        """Truncate to the smaller ball {1 <= |k| <= cutoff} (Pi_N)."""
        if cutoff >= self.cutoff:
            return self
        lat = lattice(self.dim, cutoff)
        coeffs = np.zeros((lat.n, self.dim), dtype=np.complex128)
        keep = self.lattice.norm2 <= cutoff * cutoff
        for i in np.nonzero(keep)[0]:
            coeffs[lat.index(self.lattice.modes[i])] = self.coeffs[i]
        return SpectralField(lat, coeffs)

    def extend(self, cutoff: int) -> "SpectralField":
        """Zero-pad to a larger ball."""
        if cutoff <= self.cutoff:
            return self.restrict(cutoff)
        lat = lattice(self.dim, cutoff)
        coeffs = np.zeros((lat.n, self.dim), dtype=np.complex128)
        for i, k in enumerate(self.lattice.modes):
            coeffs[lat.index(k)] = self.coeffs[i]
        return SpectralField(lat, coeffs)

    def __add__(self, other: "SpectralField") -> "SpectralField":
        self._check_compatible(other)
        return self.with_coeffs(self.coeffs + other.coeffs)

    def __sub__(self, other: "SpectralField") -> "SpectralField":
        self._check_compatible(other)
        return self.with_coeffs(self.coeffs - other.coeffs)

    def __mul__(self, scalar) -> "SpectralField":
        return self.with_coeffs(self.coeffs * scalar)

    __rmul__ = __mul__

    def _check_compatible(self, other: "SpectralField"):
        if self.lattice is not other.lattice:
            if (self.dim, self.cutoff) != (other.dim, other.cutoff):
                raise ValueError(
                    f"cutoff mismatch: ({self.dim},{self.cutoff}) vs "
                    f"({other.dim},{other.cutoff})"
                )

    def inner(self, other: "SpectralField") -> float:
        """Real L^2 pairing <u, v> = sum_k u_hat[k] . conj(v_hat[k])."""
        self._check_compatible(other)
        return float(np.real(np.sum(self.coeffs * np.conj(other.coeffs))))

    def to_snapshot(self) -> dict:
        """JSON-serializable snapshot (canonical half-lattice only)."""
        rows = []
        for i in np.nonzero(self.lattice.canonical)[0]:
            rows.append(
                {
                    "k": [int(c) for c in self.lattice.modes[i]],
                    "re": [float(x) for x in self.coeffs[i].real],
                    "im": [float(x) for x in self.coeffs[i].imag],
                }
            )
        return {"dim": self.dim, "cutoff": self.cutoff, "modes": rows}

    @classmethod
    def from_snapshot(cls, snap: dict) -> "SpectralField":
        """Inverse of to_snapshot; -k entries reconstructed by conjugation."""
        lat = lattice(snap["dim"], snap["cutoff"])
        coeffs = np.zeros((lat.n, lat.dim), dtype=np.complex128)
        for row in snap["modes"]:
            c = np.array(row["re"], dtype=float) + 1j * np.array(row["im"], dtype=float)
            i = lat.index(row["k"])
            coeffs[i] = c
            coeffs[lat.conj_idx[i]] = np.conj(c)
        return cls(lat, coeffs)

    def dumps(self) -> str:
        return json.dumps(self.to_snapshot())

    @classmethod
    def loads(cls, s: str) -> "SpectralField":
        return cls.from_snapshot(json.loads(s))


def sobolev_norm(u: SpectralField, s: float) -> float:
    """H^s norm: sqrt( sum_k (2 pi |k|)^(2s) |u_hat[k]|^2 )."""
    w = (TWO_PI * u.lattice.norm) ** (2.0 * s)
    return float(np.sqrt(np.sum(w * np.sum(np.abs(u.coeffs) ** 2, axis=1))))


def leray_project(x: SpectralField) -> SpectralField:
    """Helmholtz-Leray projection: u_hat[k] -> u_hat[k] - (k.u_hat[k]/|k|^2) k."""
    k = x.lattice.modes
    dots = np.sum(k * x.coeffs, axis=1) / x.lattice.norm2
    return x.with_coeffs(x.coeffs - dots[:, None] * k)


def leray_complement(x: SpectralField) -> SpectralField:
    """The gradient part: u_hat[k] -> (k.u_hat[k]/|k|^2) k."""
    k = x.lattice.modes
    dots = np.sum(k * x.coeffs, axis=1) / x.lattice.norm2
    return x.with_coeffs(dots[:, None] * k)


def smoothing_k(u: SpectralField, gamma0: float) -> SpectralField:
    """Leray smoothing v = (1 + (-Delta)^gamma0)^(-1) u, per-mode division."""
    if gamma0 <= 0:
        raise ValueError(f"gamma0 must be positive, got {gamma0}")
    scale = 1.0 / (1.0 + (TWO_PI * u.lattice.norm) ** (2.0 * gamma0))
    return u.with_coeffs(u.coeffs * scale[:, None])


def heat_semigroup(u: SpectralField, t: float, mu: float) -> SpectralField:
    """e^(mu t Delta) u with Delta e_k = -4 pi^2 |k|^2 e_k."""
    if t < 0:
        raise ValueError(f"time must be nonnegative, got {t}")
    if mu <= 0:
        raise ValueError(f"diffusivity must be positive, got {mu}")
    if t == 0:
        return u
    scale = np.exp(-((TWO_PI**2) * u.lattice.norm2) * mu * t)
    return u.with_coeffs(u.coeffs * scale[:, None])


@dataclass
class NoiseBasis:
    """Unit vectors a[k, i] spanning k-perp with a[k, i] = a[-k, i].

    `vectors` has shape (lattice.n, dim - 1, dim).  The fields
    sigma[k, i] = a[k, i] e_k are the divergence-free noise directions.
    """

    lattice: Lattice
    vectors: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.vectors = np.ascontiguousarray(self.vectors, dtype=float)
        self.vectors.flags.writeable = False

    @property
    def dim(self) -> int:
        return self.lattice.dim

    @property
    def max_mode(self) -> int:
        return self.lattice.cutoff

    def at(self, k, i: int) -> np.ndarray:
        return self.vectors[self.lattice.index(k), i]


@lru_cache(maxsize=None)
def make_noise_basis(dim: int, max_mode: int) -> NoiseBasis:
    """Deterministic orthonormal bases of k-perp, equal at k and -k.

    2D: a[k] = perp(k+)/|k| where k+ is the canonical representative.
    3D: a[k,1] = normalize(k+ x e), e the first coordinate axis not parallel
    to k+; a[k,2] = normalize(k+ x a[k,1]).
    """
    lat = lattice(dim, max_mode)
    vectors = np.zeros((lat.n, dim - 1, dim))
    for i in np.nonzero(lat.canonical)[0]:
        k = lat.modes[i].astype(float)
        if dim == 2:
            a = np.array([-k[1], k[0]]) / np.linalg.norm(k)
            vectors[i, 0] = a
        else:
            for axis in range(3):
                e = np.zeros(3)
                e[axis] = 1.0
                a1 = np.cross(k, e)
                if np.linalg.norm(a1) > 1e-12:
                    break
            a1 /= np.linalg.norm(a1)
            a2 = np.cross(k, a1)
            a2 /= np.linalg.norm(a2)
            vectors[i, 0] = a1
            vectors[i, 1] = a2
        vectors[lat.conj_idx[i]] = vectors[i]
    return NoiseBasis(lat, vectors)
