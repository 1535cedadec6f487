"""Kahler metrics from potentials on the flat torus.

A background metric is g = identity + complex Hessian of a potential rho0;
a state deforms it by a further potential phi.  All curvature is computed
spectrally from rho0.  Sign conventions, fixed once for the whole package:

    Ric_{ij} = - d/dz_i d/dzb_j log det g
    R        = tr_g Ric
    R_{ij,kl} = - d4 g_{ij}/dz_k dzb_l + g^{pq} (d g_{iq}/dz_k)(d g_{pj}/dzb_l)

which make the flat metric exactly flat and satisfy g^{ij} R_{ij,kl} = Ric_{kl}.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .lattice import (
    ComplexField,
    HermitianField,
    Lattice,
    ScalarField,
    complex_hessian,
    integrate,
)

DELTA_POS = 1e-8

__all__ = [
    "DELTA_POS",
    "NotKahler",
    "BackgroundGeometry",
    "MetricState",
    "assemble",
    "laplace_phi",
    "grad_norms",
    "curvature_contractions",
    "wirtinger_grad",
    "third_derivatives",
]


class NotKahler(Exception):
    """The deformed metric lost positivity (omega_phi > 0 violated)."""


def wirtinger_grad(f: ScalarField):
    """First derivatives d f/dz_k, k = 1..n, as complex arrays."""
    lat = f.lattice
    spec = lat.rspec(f.values)
    out = []
    for j in range(lat.n):
        mx = 2j * np.pi * lat._kr[2 * j]
        my = 2j * np.pi * lat._kr[2 * j + 1]
        fx = lat.rspec_inv(mx * spec)
        fy = lat.rspec_inv(my * spec)
        out.append(0.5 * (fx - 1j * fy))
    return out


def _third_single(lat, spec, p, q, i):
    mr, mi = lat.mult_dd(p, q)
    if mi is None:
        mpq = mr
    else:
        mpq = mr + 1j * mi
    # multiply by d/dz_i: i pi kx + pi ky.  The combined multiplier w is
    # odd under k -> -k, so the real and imaginary parts of the resulting
    # field come from the odd-symmetric splits i*Im(w) and -i*Re(w).
    kx, ky = lat._kr[2 * i], lat._kr[2 * i + 1]
    w = mpq * (1j * np.pi * kx + np.pi * ky)
    re = lat.rspec_inv(1j * np.imag(w) * spec)
    im = lat.rspec_inv(-1j * np.real(w) * spec)
    return re + 1j * im


class LazyThird:
    """Mapping view of the third-derivative family, computed per entry.

    Holds only the Fourier spectrum; each lookup re-synthesizes the field.
    Trades repeated transforms for a small memory footprint on big grids.
    """

    def __init__(self, f: ScalarField):
        self.lat = f.lattice
        self.spec = self.lat.rspec(f.values)

    def __getitem__(self, key):
        p, q, i = key
        return _third_single(self.lat, self.spec, p, q, i)


def third_derivatives(f: ScalarField, lazy=False):
    """All d3 f/dz_p dzb_q dz_i as a mapping {(p, q, i): complex array},
    p <= i.

    The tensor is symmetric in (p, i); entries with p > i are looked up
    transposed.  The conjugate family d3/dzb dz dzb is the pointwise
    conjugate with (p, q) swapped.  With ``lazy`` the entries are not
    stored; each access re-synthesizes the field from the spectrum.
    """
    if lazy:
        return LazyThird(f)
    lat = f.lattice
    spec = lat.rspec(f.values)
    out = {}
    for p in range(lat.n):
        for q in range(lat.n):
            for i in range(p, lat.n):
                out[(p, q, i)] = _third_single(lat, spec, p, q, i)
    return out


def holomorphic_hessian(f: ScalarField):
    """Second unbarred derivatives d2 f/dz_i dz_j as {(i, j): complex}, i <= j."""
    lat = f.lattice
    spec = lat.rspec(f.values)
    out = {}
    for i in range(lat.n):
        for j in range(i, lat.n):
            di = 1j * np.pi * lat._kr[2 * i] + np.pi * lat._kr[2 * i + 1]
            dj = 1j * np.pi * lat._kr[2 * j] + np.pi * lat._kr[2 * j + 1]
            m = di * dj
            # even multiplier: real/imag parts split directly
            re = lat.rspec_inv(np.real(m) * spec)
            im = lat.rspec_inv(np.imag(m) * spec)
            out[(i, j)] = re + 1j * im
    return out


def hol_entry(hh, i, j):
    if i <= j:
        return hh[(i, j)]
    return hh[(j, i)]


def third_entry(third, p, q, i):
    """Entry d3/dz_p dzb_q dz_i from the dict, using (p, i) symmetry."""
    if p <= i:
        return third[(p, q, i)]
    return third[(i, q, p)]


@dataclass
class BackgroundGeometry:
    """Background torus metric g = I + Hessian(rho0) with cached curvature."""

    lattice: Lattice
    rho0: ScalarField
    g: HermitianField
    R_bar: float = 0.0

    def __post_init__(self):
        if self.g.min_eig() <= DELTA_POS:
            raise NotKahler("background metric is not positive definite")

    @classmethod
    def flat(cls, lattice: Lattice):
        zero = ScalarField(lattice, np.broadcast_to(
            np.float64(0.0), lattice.shape))
        return cls(lattice, zero, HermitianField.identity(lattice),
                   R_bar=0.0)

    @property
    def is_flat(self):
        return not np.any(self.rho0.values)

    @classmethod
    def from_potential(cls, rho0: ScalarField, R_bar: float = 0.0):
        g = HermitianField.identity(rho0.lattice).add(complex_hessian(rho0))
        return cls(rho0.lattice, rho0, g, R_bar=R_bar)

    @cached_property
    def det_g(self):
        if self.is_flat:
            return np.broadcast_to(np.float64(1.0), self.lattice.shape)
        return self.g.det()

    @cached_property
    def log_det_g(self):
        if self.is_flat:
            return ScalarField(self.lattice, np.broadcast_to(
                np.float64(0.0), self.lattice.shape))
        return ScalarField(self.lattice, np.log(self.det_g))

    @cached_property
    def ricci(self) -> HermitianField:
        if self.is_flat:
            return HermitianField.identity(self.lattice, scale=0.0)
        return complex_hessian(self.log_det_g).scale(-1.0)

    @cached_property
    def scalar_curv(self) -> ScalarField:
        return ScalarField(self.lattice, self.g.trace_inv(self.ricci))

    @cached_property
    def ric_sup(self):
        """Max over the lattice of the g-eigenvalues of |Ric|."""
        lo, hi = _gen_eig_range(self.g, self.ricci)
        return float(max(np.abs(lo).max(), np.abs(hi).max()))

    @cached_property
    def ric_eig_max(self):
        """Max over the lattice of the largest g-eigenvalue of Ric."""
        return float(_gen_eig_range(self.g, self.ricci)[1].max())

    @cached_property
    def ric_eig_min(self):
        return float(_gen_eig_range(self.g, self.ricci)[0].min())

    @cached_property
    def curvature(self):
        """Full tensor R_{ij,kl} as (..., n, n, n, n) complex (lazy, sizable)."""
        n = self.lattice.n
        third = third_derivatives(self.rho0)
        fourth = _fourth_derivatives(self.rho0)
        ginv = self.g.inv()
        sh = self.lattice.shape
        R = np.zeros(sh + (n, n, n, n), dtype=complex)
        for i in range(n):
            for j in range(n):
                for k in range(n):
                    for l in range(n):
                        val = -_fourth_entry(fourth, i, j, k, l)
                        for p in range(n):
                            for q in range(n):
                                dg_ik = third_entry(third, i, q, k)
                                dg_pl = np.conj(third_entry(third, j, p, l))
                                val = val + ginv.entry(q, p) * dg_ik * dg_pl
                        R[..., i, j, k, l] = val
        return R

    @cached_property
    def bisec_lower(self):
        """Sampled lower bound of bisectional curvature over unit directions."""
        n = self.lattice.n
        if n == 1 and np.allclose(self.rho0.values, self.rho0.values.flat[0]):
            return 0.0
        R = self.curvature
        dirs = _direction_samples(n)
        gmat = self.g.mat()
        best = np.inf
        for v in dirs:
            nv = np.real(np.einsum("...ij,i,j->...", gmat, v, np.conj(v)))
            Rv = np.einsum("...ijkl,i,j->...kl", R, v, np.conj(v))
            for w in dirs:
                nw = np.real(np.einsum("...ij,i,j->...", gmat, w, np.conj(w)))
                num = np.real(np.einsum("...kl,k,l->...", Rv, w, np.conj(w)))
                best = min(best, float((num / (nv * nw)).min()))
        return best

    def volume(self):
        return integrate(ScalarField.constant(self.lattice, 1.0),
                         ScalarField(self.lattice, self.det_g))


def _direction_samples(n):
    if n == 1:
        return [np.array([1.0 + 0j])]
    s = 1 / np.sqrt(2)
    dirs = [
        np.array([1, 0], dtype=complex),
        np.array([0, 1], dtype=complex),
        np.array([s, s], dtype=complex),
        np.array([s, -s], dtype=complex),
        np.array([s, 1j * s], dtype=complex),
        np.array([s, -1j * s], dtype=complex),
    ]
    c, d = np.cos(np.pi / 8), np.sin(np.pi / 8)
    dirs += [np.array([c, d], dtype=complex), np.array([d, c], dtype=complex),
             np.array([c, 1j * d], dtype=complex),
             np.array([d, -1j * c], dtype=complex)]
    return dirs


def _fourth_derivatives(f: ScalarField):
    """d4 f/dz_i dzb_j dz_k dzb_l keyed by (i, j, k, l), i<=k and j<=l."""
    lat = f.lattice
    spec = lat.rspec(f.values)
    out = {}
    for i in range(lat.n):
        for j in range(lat.n):
            for k in range(i, lat.n):
                for l in range(j, lat.n):
                    m1r, m1i = lat.mult_dd(i, j)
                    m2r, m2i = lat.mult_dd(k, l)
                    m1 = m1r if m1i is None else m1r + 1j * m1i
                    m2 = m2r if m2i is None else m2r + 1j * m2i
                    m = m1 * m2
                    re = lat.rspec_inv(np.real(m) * spec)
                    im_part = np.imag(m)
                    if np.any(im_part):
                        im = lat.rspec_inv(im_part * spec)
                        out[(i, j, k, l)] = re + 1j * im
                    else:
                        out[(i, j, k, l)] = re + 0j
    return out


def _fourth_entry(fourth, i, j, k, l):
    # symmetries: (i,j,k,l) -> (k,j,i,l) and (i,l,k,j); conjugate swaps pairs
    if i > k:
        i, k = k, i
    if j > l:
        j, l = l, j
    return fourth[(i, j, k, l)]


def _gen_eig_range(g: HermitianField, h: HermitianField):
    """Eigenvalues of g^{-1} h (generalized Hermitian pair), closed form."""
    n = g.n
    if n == 1:
        e = h.diag[0] / g.diag[0]
        return e, e
    t = g.trace_inv(h)
    d = h.det() / g.det()
    disc = np.sqrt(np.maximum(t * t - 4 * d, 0.0))
    return 0.5 * (t - disc), 0.5 * (t + disc)


@dataclass
class MetricState:
    """Background + potential with cached deformed-metric data."""

    background: BackgroundGeometry
    phi: ScalarField
    g_phi: HermitianField
    g_phi_inv: HermitianField
    F: ScalarField
    det_g_phi: np.ndarray

    @cached_property
    def phi_hess(self) -> HermitianField:
        return complex_hessian(self.phi)

    @cached_property
    def eig(self):
        """Eigenvalue fields of g^{-1} g_phi, ascending."""
        e = _gen_eig_range(self.background.g, self.g_phi)
        return (e[0],) if self.lattice.n == 1 else e

    @property
    def lattice(self):
        return self.background.lattice

    @cached_property
    def twist(self) -> ScalarField:
        """Residual of the scalar-curvature equation on this state."""
        lap_F = laplace_phi(self, self.F)
        tr_ric = self.g_phi.trace_inv(self.background.ricci)
        return ScalarField(
            self.lattice,
            lap_F.values + self.background.R_bar - tr_ric,
        )

    @cached_property
    def F_hess(self) -> HermitianField:
        return complex_hessian(self.F)

    @cached_property
    def F_grad(self):
        return wirtinger_grad(self.F)

    @cached_property
    def phi_grad(self):
        return wirtinger_grad(self.phi)


def assemble(background: BackgroundGeometry, phi: ScalarField) -> MetricState:
    """Build the deformed metric state; raises NotKahler off the cone."""
    hess = complex_hessian(phi)
    g_phi = background.g.add(hess)
    if g_phi.min_eig() <= DELTA_POS:
        raise NotKahler("g + dd(phi) lost positivity")
    det_phi = g_phi.det()
    F = ScalarField(background.lattice, np.log(det_phi / background.det_g))
    return MetricState(
        background=background,
        phi=phi,
        g_phi=g_phi,
        g_phi_inv=g_phi.inv(),
        F=F,
        det_g_phi=det_phi,
    )


def laplace_phi(state: MetricState, f: ScalarField) -> ScalarField:
    """Laplacian of the deformed metric: g_phi^{ij} d2 f/dz_i dzb_j."""
    h = complex_hessian(f)
    gpi = state.g_phi_inv
    n = state.lattice.n
    out = None
    for i in range(n):
        for j in range(n):
            t = gpi.entry(j, i) * h.entry(i, j)
            if out is None:
                out = t + 0j  # keep the accumulator complex
            else:
                out += t
    return ScalarField(state.lattice, np.real(out))


def grad_norms(state: MetricState, f: ScalarField):
    """(|grad f|^2 w.r.t. g, |grad f|^2 w.r.t. g_phi), both nonnegative."""
    df = wirtinger_grad(f)
    a = state.background.g.qform_inv(df)
    b = state.g_phi.qform_inv(df)
    return (ScalarField(state.lattice, np.maximum(a, 0.0)),
            ScalarField(state.lattice, np.maximum(b, 0.0)))


@dataclass
class CurvatureContractions:
    tr_phi_ric: ScalarField
    tr_phi_g: ScalarField
    n_plus_lap: ScalarField


def curvature_contractions(state: MetricState) -> CurvatureContractions:
    lat = state.lattice
    tr_phi_ric = state.g_phi.trace_inv(state.background.ricci)
    tr_phi_g = state.g_phi.trace_inv(state.background.g)
    n_plus_lap = state.background.g.trace_inv(state.g_phi)
    return CurvatureContractions(
        tr_phi_ric=ScalarField(lat, tr_phi_ric),
        tr_phi_g=ScalarField(lat, tr_phi_g),
        n_plus_lap=ScalarField(lat, n_plus_lap),
    )
