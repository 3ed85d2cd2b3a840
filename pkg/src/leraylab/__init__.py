"""Numerical laboratory for the stochastic inviscid Leray-alpha model with
transport noise on the 2D/3D torus."""

__version__ = "0.1.0"

from .spectral import (  # noqa: F401
    SpectralField,
    lattice,
    leray_project,
    make_noise_basis,
    sobolev_norm,
)
