import numpy as np
import pytest

from cscklab.lattice import Lattice, ScalarField, random_band_limited
from cscklab.kahler import BackgroundGeometry, assemble


@pytest.fixture
def lat1():
    return Lattice(1, 32)


@pytest.fixture
def lat2():
    return Lattice(2, 16)


def curved_background(lat, seed=3, amplitude=0.03):
    rng = np.random.default_rng(seed)
    rho = random_band_limited(lat, rng, band=2, amplitude=amplitude,
                              decay=3.0)
    return BackgroundGeometry.from_potential(rho)


def random_state(lat, seed=7, amplitude=0.02, background=None):
    rng = np.random.default_rng(seed)
    bg = background or BackgroundGeometry.flat(lat)
    phi = random_band_limited(lat, rng, band=2, amplitude=amplitude,
                              decay=3.0)
    return assemble(bg, phi)


def cos_field(lat, kvec, amplitude=1.0):
    phase = sum(2.0 * np.pi * k * x for k, x in zip(kvec, lat.coords()))
    return ScalarField(lat, amplitude * np.cos(phase + np.zeros(lat.shape)))
