import numpy as np
import pytest

from leraylab.noise import stream
from leraylab.spectral import SpectralField, lattice, leray_project


def random_divergence_free(dim, cutoff, rng):
    """Random real-valued divergence-free field on the lattice ball."""
    lat = lattice(dim, cutoff)
    c = rng.normal(size=(lat.n, dim)) + 1j * rng.normal(size=(lat.n, dim))
    c = 0.5 * (c + np.conj(c[lat.conj_idx]))
    return leray_project(SpectralField(lat, c))


@pytest.fixture
def rng():
    return stream(2024, 0)
