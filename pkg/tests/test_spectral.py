import numpy as np
import pytest

from leraylab.spectral import (
    SpectralField,
    heat_semigroup,
    lattice,
    leray_complement,
    leray_project,
    make_noise_basis,
    smoothing_k,
    sobolev_norm,
)

from conftest import random_divergence_free


class TestLattice:
    def test_mode_count_2d(self):
        # 1 <= |k|^2 <= 4 in Z^2: 4 + 4 + 4 modes
        assert lattice(2, 2).n == 12

    def test_conjugation_is_involution(self):
        lat = lattice(3, 3)
        assert np.array_equal(lat.conj_idx[lat.conj_idx], np.arange(lat.n))
        assert np.array_equal(lat.modes[lat.conj_idx], -lat.modes)

    def test_canonical_splits_pairs(self):
        lat = lattice(2, 4)
        assert int(np.sum(lat.canonical)) == lat.n // 2
        # exactly one of k, -k is canonical
        assert not np.any(lat.canonical & lat.canonical[lat.conj_idx])

    def test_index_round_trip(self):
        lat = lattice(3, 2)
        for i, k in enumerate(lat.modes):
            assert lat.index(k) == i
        assert not lat.contains((0, 0, 0))
        with pytest.raises(KeyError):
            lat.index((5, 5, 5))

    def test_validation(self):
        with pytest.raises(ValueError):
            lattice(4, 2)
        with pytest.raises(ValueError):
            lattice(2, 0)


class TestSpectralField:
    def test_from_modes_and_at(self):
        u = SpectralField.from_modes(2, 3, {(1, 2): [1.0 + 1j, 0.5]})
        assert np.allclose(u.at((1, 2)), [1.0 + 1j, 0.5])
        assert np.allclose(u.at((2, 1)), 0.0)

    def test_coeffs_locked(self):
        u = SpectralField.zero(2, 2)
        with pytest.raises(ValueError):
            u.coeffs[0] = 1.0

    def test_reality_and_divergence_checks(self, rng):
        u = random_divergence_free(3, 3, rng)
        assert u.is_real()
        assert u.is_divergence_free()
        bad = u.with_coeffs(u.coeffs + np.array([1j, 0, 0]))
        assert not bad.is_real()

    def test_restrict_extend_round_trip(self, rng):
        u = random_divergence_free(2, 6, rng)
        v = u.restrict(3)
        assert v.cutoff == 3
        w = v.extend(6)
        # modes |k| <= 3 survive, the rest are zeroed
        keep = u.lattice.norm2 <= 9
        assert np.allclose(w.coeffs[keep], u.coeffs[keep])
        assert np.allclose(w.coeffs[~keep], 0.0)
        assert v.extend(6).restrict(3).coeffs == pytest.approx(v.coeffs)

    def test_arithmetic_and_inner(self, rng):
        u = random_divergence_free(2, 4, rng)
        v = random_divergence_free(2, 4, rng)
        assert np.allclose((u + v - v).coeffs, u.coeffs)
        assert (2.0 * u).inner(v) == pytest.approx(2.0 * u.inner(v))
        assert u.inner(u) == pytest.approx(np.sum(np.abs(u.coeffs) ** 2))
        with pytest.raises(ValueError):
            u + random_divergence_free(2, 5, rng)

    def test_snapshot_round_trip(self, rng):
        u = random_divergence_free(3, 2, rng)
        v = SpectralField.loads(u.dumps())
        assert v.dim == 3 and v.cutoff == 2
        assert np.max(np.abs(v.coeffs - u.coeffs)) < 1e-14


class TestOperators:
    def test_sobolev_norm_single_mode(self):
        u = SpectralField.from_modes(2, 3, {(2, 1): [1.0, 0.0], (-2, -1): [1.0, 0.0]})
        expected = np.sqrt(2.0) * (2 * np.pi * np.sqrt(5.0)) ** (-0.7)
        assert sobolev_norm(u, -0.7) == pytest.approx(expected, rel=1e-13)

    def test_leray_projection_decomposition(self, rng):
        lat = lattice(3, 3)
        x = SpectralField(lat, rng.normal(size=(lat.n, 3)) + 0j)
        p = leray_project(x)
        q = leray_complement(x)
        assert np.allclose(p.coeffs + q.coeffs, x.coeffs)
        assert p.is_divergence_free(1e-12)
        # idempotent, and orthogonal to the gradient part
        assert np.allclose(leray_project(p).coeffs, p.coeffs)
        assert abs(p.inner(q)) < 1e-10

    def test_smoothing_k_single_mode(self):
        u = SpectralField.from_modes(2, 2, {(1, 0): [0.0, 1.0], (-1, 0): [0.0, 1.0]})
        v = smoothing_k(u, 0.6)
        expected = 1.0 / (1.0 + (2 * np.pi) ** 1.2)
        assert v.at((1, 0))[1] == pytest.approx(expected, rel=1e-13)
        with pytest.raises(ValueError):
            smoothing_k(u, 0.0)

    def test_heat_semigroup_exact_decay(self):
        u = SpectralField.from_modes(2, 2, {(1, 1): [1.0, -1.0], (-1, -1): [1.0, -1.0]})
        v = heat_semigroup(u, 0.3, 0.5)
        expected = np.exp(-4 * np.pi**2 * 2 * 0.5 * 0.3)
        assert np.allclose(v.coeffs, expected * u.coeffs, rtol=1e-13)
        with pytest.raises(ValueError):
            heat_semigroup(u, -1.0, 0.5)
        with pytest.raises(ValueError):
            heat_semigroup(u, 0.1, 0.0)


class TestNoiseBasis:
    @pytest.mark.parametrize("dim", [2, 3])
    def test_frames_orthonormal_and_perpendicular(self, dim):
        basis = make_noise_basis(dim, 3)
        lat = basis.lattice
        for row in range(lat.n):
            k = lat.modes[row].astype(float)
            frame = basis.vectors[row]
            gram = frame @ frame.T
            assert np.allclose(gram, np.eye(dim - 1), atol=1e-12)
            assert np.max(np.abs(frame @ k)) < 1e-12

    def test_equal_at_opposite_modes(self):
        basis = make_noise_basis(3, 2)
        lat = basis.lattice
        assert np.allclose(basis.vectors, basis.vectors[lat.conj_idx])
        assert np.allclose(basis.at((1, 0, 1), 0), basis.at((-1, 0, -1), 0))
