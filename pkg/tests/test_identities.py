import numpy as np
import pytest

from cscklab.lattice import Lattice, ScalarField, random_band_limited
from cscklab.kahler import BackgroundGeometry, assemble
from cscklab.identities import (
    StateDerivs,
    cancel222_pointwise,
    run_identity,
    square220_pointwise,
    tol_id,
)

from conftest import curved_background, random_state

IDENTITY_NAMES = ("gradF", "bochner", "yau2nd", "localG")


def _state_at(n, N, seed=5, curved=True):
    rng = np.random.default_rng(seed)
    lat = Lattice(n, N)
    if curved:
        rho = random_band_limited(lat, rng, band=2, amplitude=0.02,
                                  decay=3.0)
        bg = BackgroundGeometry.from_potential(rho)
    else:
        random_band_limited(lat, rng, band=2, amplitude=0.02, decay=3.0)
        bg = BackgroundGeometry.flat(lat)
    phi = random_band_limited(lat, rng, band=2, amplitude=0.02, decay=3.0)
    return assemble(bg, phi)


@pytest.mark.parametrize("name", IDENTITY_NAMES)
@pytest.mark.parametrize("n,curved", [(1, False), (1, True), (2, True)])
def test_identity_passes_at_n16(name, n, curved):
    st = _state_at(n, 16, curved=curved)
    check = run_identity(name, st)
    assert check.passed, (name, check.max_residual, check.tolerance)


@pytest.mark.parametrize("name", IDENTITY_NAMES)
def test_identity_refines_n1(name):
    # residual drops by a large factor from N=16 to N=32 on the same
    # continuum state (band-limited draw is N-independent)
    res = {}
    for N in (16, 32):
        st = _state_at(1, N, curved=True)
        res[N] = run_identity(name, st).max_residual
    order = np.log2(res[16] / max(res[32], 1e-300))
    assert order > 3.5, (name, res)


def test_bochner_arbitrary_test_function():
    # the formula holds for any scalar f, not just F
    st = _state_at(1, 32)
    rng = np.random.default_rng(17)
    f = random_band_limited(st.lattice, rng, band=2, amplitude=0.1)
    check = run_identity("bochner", st, f=f)
    assert check.passed


def test_bochner_Bprime_zero_reduces():
    # with B' = 0 the exponential weight drops out
    st = _state_at(1, 16)
    check = run_identity("bochner", st, B_prime=0.0)
    assert check.passed


def test_identity_trivial_on_flat_zero_state():
    lat = Lattice(1, 16)
    st = assemble(BackgroundGeometry.flat(lat), ScalarField.constant(lat))
    for name in IDENTITY_NAMES:
        check = run_identity(name, st)
        assert check.max_residual < 1e-12, name


def test_square220_pointwise_oracle():
    rng = np.random.default_rng(0)
    for n in (1, 2):
        worst = float(square220_pointwise(rng, n, 2000).max())
        assert worst < 1e-10, (n, worst)


def test_cancel222_pointwise_oracle():
    rng = np.random.default_rng(1)
    for n in (1, 2):
        worst = float(cancel222_pointwise(rng, n, 2000).max())
        assert worst < 1e-10, (n, worst)


def test_square220_on_grid_state():
    st = _state_at(2, 16)
    check = run_identity("square220", st, lam=1.3)
    assert check.max_residual < 1e-10 * max(
        1.0, np.abs(check.rhs.values).max())


def test_cancel222_on_grid_state():
    st = _state_at(2, 16)
    check = run_identity("cancel222", st, lam=0.7)
    assert check.max_residual < 1e-10 * max(
        1.0, np.abs(check.rhs.values).max())


def test_tol_id_monotone_in_N():
    assert tol_id(32) < tol_id(16)
    assert tol_id(64) < tol_id(32)
    assert tol_id(16, scale=100.0) > tol_id(16, scale=1.0)


def test_state_derivs_shared_cache():
    st = _state_at(1, 16)
    d = StateDerivs(st)
    a = run_identity("gradF", st, derivs=d)
    b = run_identity("gradF", st)
    assert a.max_residual == pytest.approx(b.max_residual, rel=1e-12)


def test_run_identity_unknown_name():
    st = _state_at(1, 16)
    with pytest.raises(KeyError):
        run_identity("nope", st)
