"""Periodic lattice on the real torus underlying (C/Z+iZ)^n, with spectral calculus.

The torus has unit side length in each of the 2n real coordinates, ordered
(x1, y1, ..., xn, yn) with z_k = x_k + i*y_k.  All differentiation is spectral
(exact to round-off on band-limited data) and quadrature is the plain lattice
average, which is spectrally accurate for periodic integrands.

Derivative convention, used everywhere in this package:

    d/dz_k  = (d/dx_k - i d/dy_k) / 2
    d/dzb_k = (d/dx_k + i d/dy_k) / 2

so that d/dz d/dzb = Laplacian/4 on functions of a single real axis.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np
import scipy.fft as sfft

__all__ = [
    "Lattice",
    "ScalarField",
    "ComplexField",
    "HermitianField",
    "derive",
    "complex_hessian",
    "integrate",
    "random_band_limited",
    "dump_fields_csv",
]

_AXIS_RE = re.compile(r"^(x|y|z|zb)([1-9][0-9]*)$")


class Lattice:
    """Uniform periodic grid with N points per real axis (2n axes total).

    Axis a of every field array corresponds to real coordinate a in the
    ordering (x1, y1, ..., xn, yn); coordinates live in [0, 1).
    """

    def __init__(self, n: int, N: int):
        if n not in (1, 2):
            raise ValueError(f"complex dimension must be 1 or 2, got {n}")
        if N < 8 or (N & (N - 1)) != 0:
            raise ValueError(f"N must be a power of two >= 8, got {N}")
        self.n = n
        self.N = N
        self.h = 1.0 / N
        self.shape = (N,) * (2 * n)
        self.num_points = N ** (2 * n)
        # Integer modes, broadcastable along each axis.  Nyquist is zeroed so
        # odd-order derivatives of real data stay exactly real.
        k = np.fft.fftfreq(N) * N
        k[N // 2] = 0.0
        kr = np.arange(N // 2 + 1, dtype=float)
        kr[-1] = 0.0
        self._k = [self._along(k, a) for a in range(2 * n)]
        self._kr = [self._along(k, a) for a in range(2 * n - 1)] + [
            self._along(kr, 2 * n - 1)
        ]
        self._coords = None

    def _along(self, vec, axis):
        shape = [1] * (2 * self.n)
        shape[axis] = len(vec)
        return vec.reshape(shape)

    def coords(self):
        """Coordinate arrays, one broadcastable array per real axis."""
        if self._coords is None:
            x = np.arange(self.N) * self.h
            self._coords = [self._along(x, a) for a in range(2 * self.n)]
        return self._coords

    def axis_index(self, symbol: str):
        """Map 'x2' -> real axis 2, 'y1' -> 1, 'z1'/'zb1' -> complex index 0."""
        m = _AXIS_RE.match(symbol)
        if not m:
            raise ValueError(f"unknown axis symbol {symbol!r}")
        kind, idx = m.group(1), int(m.group(2))
        if idx > self.n:
            raise ValueError(
                f"axis {symbol!r} references complex direction {idx} "
                f"but the lattice has n={self.n}"
            )
        return kind, idx - 1

    # -- spectral kernels ---------------------------------------------------

    def rspec(self, values):
        return sfft.rfftn(values)

    def rspec_inv(self, spec):
        return sfft.irfftn(spec, s=self.shape)

    def mult_dd(self, i: int, j: int):
        """Multiplier of d/dz_i d/dzb_j on the rfft grid, split (real, imag).

        Both parts are even in k, so each maps a real field to a real field.
        """
        a, b = self._kr[2 * i], self._kr[2 * i + 1]
        c, d = self._kr[2 * j], self._kr[2 * j + 1]
        pi2 = np.pi ** 2
        mr = -pi2 * (a * c + b * d)
        if i == j:
            return mr, None
        mi = -pi2 * (a * d - b * c)
        return mr, mi

    def mult_full(self, symbols):
        """Complex multiplier for a Wirtinger/real multi-index on the full grid."""
        m = 1.0
        for s in symbols:
            kind, j = self.axis_index(s)
            if kind == "x":
                m = m * (2j * np.pi * self._k[2 * j])
            elif kind == "y":
                m = m * (2j * np.pi * self._k[2 * j + 1])
            elif kind == "z":
                m = m * (1j * np.pi * self._k[2 * j] + np.pi * self._k[2 * j + 1])
            else:  # zb
                m = m * (1j * np.pi * self._k[2 * j] - np.pi * self._k[2 * j + 1])
        return m

    def __eq__(self, other):
        return (
            isinstance(other, Lattice) and self.n == other.n and self.N == other.N
        )

    def __repr__(self):
        return f"Lattice(n={self.n}, N={self.N})"


@dataclass
class ScalarField:
    """Real-valued function sampled on the lattice."""

    lattice: Lattice
    values: np.ndarray
    band_limit: int | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != self.lattice.shape:
            raise ValueError(
                f"values shape {self.values.shape} != lattice shape "
                f"{self.lattice.shape}"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field contains non-finite values")

    @classmethod
    def constant(cls, lattice, c=0.0):
        return cls(lattice, np.full(lattice.shape, float(c)))

    @classmethod
    def from_function(cls, lattice, fn, band_limit=None):
        return cls(lattice, np.asarray(fn(*lattice.coords()), dtype=float)
                   + np.zeros(lattice.shape), band_limit=band_limit)

    def mean(self):
        return float(self.values.mean())

    def __add__(self, other):
        vals = other.values if isinstance(other, ScalarField) else other
        return ScalarField(self.lattice, self.values + vals)

    def __sub__(self, other):
        vals = other.values if isinstance(other, ScalarField) else other
        return ScalarField(self.lattice, self.values - vals)

    def __mul__(self, other):
        vals = other.values if isinstance(other, ScalarField) else other
        return ScalarField(self.lattice, self.values * vals)

    __rmul__ = __mul__


@dataclass
class ComplexField:
    """Complex-valued function sampled on the lattice (derivative data)."""

    lattice: Lattice
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=complex)
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field contains non-finite values")


class HermitianField:
    """n x n complex Hermitian matrix per lattice point, stored compactly.

    For n=1 the single entry is real; for n=2 the two diagonal entries are
    real arrays and the (1,2) entry is one complex array.  This keeps the
    n=2, N=64 workloads within memory.
    """

    def __init__(self, lattice: Lattice, diag, off=None):
        self.lattice = lattice
        self.n = lattice.n
        self.diag = [np.asarray(d, dtype=float) for d in diag]
        self.off = None if off is None else np.asarray(off, dtype=complex)
        if len(self.diag) != self.n:
            raise ValueError("wrong number of diagonal entries")
        if self.n == 2 and self.off is None:
            raise ValueError("n=2 requires the off-diagonal entry")

    @classmethod
    def identity(cls, lattice, scale=1.0):
        sh = lattice.shape
        # broadcast views: constant fields cost no memory
        diag = [np.broadcast_to(np.float64(scale), sh)
                for _ in range(lattice.n)]
        off = np.broadcast_to(np.complex128(0.0), sh) \
            if lattice.n == 2 else None
        return cls(lattice, diag, off)

    def entry(self, i, j):
        """Entry (i, j), with the Hermitian conjugate applied below diagonal."""
        if i == j:
            return self.diag[i]
        return self.off if i < j else np.conj(self.off)

    def det(self):
        if self.n == 1:
            return self.diag[0].copy()
        return self.diag[0] * self.diag[1] - np.abs(self.off) ** 2

    def trace(self):
        return sum(self.diag)

    def inv(self):
        if self.n == 1:
            return HermitianField(self.lattice, [1.0 / self.diag[0]])
        d = self.det()
        return HermitianField(
            self.lattice, [self.diag[1] / d, self.diag[0] / d], -self.off / d
        )

    def eigvals(self):
        """Eigenvalues as real arrays, ascending (closed-form for n<=2)."""
        if self.n == 1:
            return (self.diag[0],)
        half = 0.5 * (self.diag[0] + self.diag[1])
        disc = np.sqrt(0.25 * (self.diag[0] - self.diag[1]) ** 2
                       + np.abs(self.off) ** 2)
        return (half - disc, half + disc)

    def min_eig(self):
        return float(self.eigvals()[0].min())

    def qform_inv(self, v):
        """g^{ij} v_i conj(v_j) with g = self; v a list of n complex arrays."""
        gi = self.inv()
        out = 0.0
        for i in range(self.n):
            for j in range(self.n):
                out = out + gi.entry(j, i) * v[i] * np.conj(v[j])
        return np.real(out)

    def trace_inv(self, other):
        """tr(self^{-1} other) for Hermitian other; real array."""
        gi = self.inv()
        out = 0.0
        for i in range(self.n):
            for j in range(self.n):
                out = out + gi.entry(j, i) * other.entry(i, j)
        return np.real(out)

    def add(self, other, sign=1.0):
        diag = [a + sign * b for a, b in zip(self.diag, other.diag)]
        off = None
        if self.n == 2:
            off = self.off + sign * other.off
        return HermitianField(self.lattice, diag, off)

    def add_scalar_identity(self, c):
        diag = [d + c for d in self.diag]
        return HermitianField(self.lattice, diag, self.off)

    def scale(self, c):
        off = None if self.off is None else c * self.off
        return HermitianField(self.lattice, [c * d for d in self.diag], off)

    def mat(self):
        """Dense (..., n, n) complex array; for tests and small lattices."""
        out = np.empty(self.lattice.shape + (self.n, self.n), dtype=complex)
        for i in range(self.n):
            for j in range(self.n):
                out[..., i, j] = self.entry(i, j)
        return out

    def max_hermitian_defect(self):
        # storage is Hermitian by construction; diagonal reality is the defect
        return 0.0


# -- operations -------------------------------------------------------------


def derive(f, multi_index):
    """Spectral derivative for a multi-index of axis symbols.

    Symbols are 'x<k>', 'y<k>' (real axes), 'z<k>', 'zb<k>' (Wirtinger).
    Returns a ScalarField when only real axes appear, else a ComplexField.
    """
    lat = f.lattice
    symbols = list(multi_index)
    if len(symbols) > 4:
        raise ValueError("multi_index length must be <= 4")
    kinds = [lat.axis_index(s)[0] for s in symbols]
    vals = f.values
    spec = sfft.fftn(np.asarray(vals, dtype=complex))
    out = sfft.ifftn(spec * lat.mult_full(symbols))
    if all(k in ("x", "y") for k in kinds) and not np.iscomplexobj(vals):
        return ScalarField(lat, out.real)
    return ComplexField(lat, out)


def complex_hessian(f: ScalarField) -> HermitianField:
    """The matrix of d/dz_i d/dzb_j derivatives; Hermitian by construction."""
    lat = f.lattice
    spec = lat.rspec(f.values)
    diag = []
    for i in range(lat.n):
        mr, _ = lat.mult_dd(i, i)
        diag.append(lat.rspec_inv(mr * spec))
    off = None
    if lat.n == 2:
        mr, mi = lat.mult_dd(0, 1)
        off = lat.rspec_inv(mr * spec) + 1j * lat.rspec_inv(mi * spec)
    return HermitianField(lat, diag, off)


def integrate(f, weight=None):
    """Integral over the unit-volume torus: lattice average of f * weight."""
    vals = f.values if isinstance(f, (ScalarField, ComplexField)) else np.asarray(f)
    if weight is not None:
        w = weight.values if isinstance(weight, ScalarField) else np.asarray(weight)
        if np.any(w < 0):
            raise ValueError("quadrature weight must be nonnegative")
        vals = vals * w
    return float(np.mean(vals))


def random_band_limited(lattice, rng, band=3, amplitude=0.1, decay=2.0,
                        mean_zero=True):
    """Random real trigonometric polynomial with modes |k|_inf <= band.

    Mode coefficients are drawn on the fixed [-band, band]^{2n} box, so the
    same rng seed describes one continuum field regardless of N; refinement
    studies rely on this.  Coefficients fall off like (1+|k|)^-decay and the
    field is rescaled so the coefficient l1 norm (a sup-norm bound) equals
    `amplitude`, again independent of N.
    """
    if band >= lattice.N // 2:
        raise ValueError("band must resolve on the lattice")
    d = 2 * lattice.n
    box = (2 * band + 1,) * d
    coef = rng.standard_normal(box) + 1j * rng.standard_normal(box)
    modes = np.arange(-band, band + 1)
    grid = np.meshgrid(*([modes] * d), indexing="ij")
    norm = np.sqrt(sum(g.astype(float) ** 2 for g in grid))
    coef *= np.where(norm == 0, 0.0, (1.0 + norm) ** (-decay))
    # embed into the lattice spectrum; the real part of the inverse
    # transform Hermitian-symmetrizes the coefficients
    spec = np.zeros(lattice.shape, dtype=complex)
    idx = np.ix_(*([modes % lattice.N] * d))
    spec[idx] = coef
    vals = sfft.ifftn(spec).real * lattice.num_points
    l1 = np.abs(coef).sum()
    if l1 > 0 and amplitude is not None:
        vals *= amplitude / l1
    if mean_zero:
        vals -= vals.mean()
    return ScalarField(lattice, vals, band_limit=band)


def dump_fields_csv(path, lattice, fields):
    """Write named scalar fields as CSV.

    Line 1 is the header ``n,N``, line 2 the values, line 3 the field names;
    then one row per lattice point in row-major axis order, x1 fastest.
    """
    names = list(fields)
    cols = [np.ravel(fields[name].values, order="F") for name in names]
    with open(path, "w") as fh:
        fh.write("n,N\n")
        fh.write(f"{lattice.n},{lattice.N}\n")
        fh.write(",".join(names) + "\n")
        data = np.column_stack(cols)
        np.savetxt(fh, data, delimiter=",", fmt="%.17g")
