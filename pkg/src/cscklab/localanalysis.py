"""Ball-domain companions: contact-set machinery and a divergence-form
sup bound, exercised on explicit function families.

Everything lives on a uniform grid over the bounding square of the ball
B_radius in R^d (d = 2).  Finite differences are 4th-order central stencils,
so the interior is kept a stencil-width away from the sphere and function
values are required on a band just outside it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .estimates import CheckResult

ABP_RATIO_BOUND = 10.0
MOSER_RATIO_BOUND = 5.0
CONTACT_SLACK_C = 2.0
MOSER_SLACK_C = 20.0


class HypothesisViolated(Exception):
    """The constructed divergence inequality fails on the interior."""


@dataclass
class BallGrid:
    """Uniform grid on the bounding square of B_radius in R^d (d = 2)."""

    d: int
    radius: float
    h: float

    def __post_init__(self):
        if self.d != 2:
            raise ValueError("only d = 2 is implemented")
        m = int(round(self.radius / self.h))
        if abs(m * self.h - self.radius) > 1e-12:
            raise ValueError("radius must be a multiple of h")
        xs = self.h * np.arange(-m - 1, m + 2)  # one cell beyond the square
        self.xs = xs
        self.X, self.Y = np.meshgrid(xs, xs, indexing="ij")
        self.r = np.sqrt(self.X ** 2 + self.Y ** 2)
        self.inside = self.r <= self.radius + 1e-12
        self.boundary_band = np.abs(self.r - self.radius) <= self.h + 1e-12
        # repeated 4th-order stencils (reach 4h) stay inside or in the band
        self.interior = self.r < self.radius - 3 * self.h - 1e-12

    def field(self, fn):
        """Evaluate fn(x, y) on the whole bounding grid."""
        return np.asarray(fn(self.X, self.Y), dtype=float)

    def cell_volume(self):
        return self.h ** self.d


def _d1(u, h, axis):
    """4th-order first derivative; valid two cells from the array edge."""
    out = np.zeros_like(u)
    s = [slice(2, -2)] * u.ndim
    core = tuple(s)

    def sh(k):
        t = list(s)
        t[axis] = slice(2 + k, u.shape[axis] - 2 + k or None)
        return u[tuple(t)]

    out[core] = (-sh(2) + 8 * sh(1) - 8 * sh(-1) + sh(-2)) / (12 * h)
    return out


def _d2(u, h, axis):
    """4th-order second derivative; valid two cells from the array edge."""
    out = np.zeros_like(u)
    s = [slice(2, -2)] * u.ndim
    core = tuple(s)

    def sh(k):
        t = list(s)
        t[axis] = slice(2 + k, u.shape[axis] - 2 + k or None)
        return u[tuple(t)]

    out[core] = (-sh(2) + 16 * sh(1) - 30 * sh(0) + 16 * sh(-1) - sh(-2)) \
        / (12 * h ** 2)
    return out


def _gradient(grid, u):
    return _d1(u, grid.h, 0), _d1(u, grid.h, 1)


def _hessian(grid, u):
    uxx = _d2(u, grid.h, 0)
    uyy = _d2(u, grid.h, 1)
    uxy = _d1(_d1(u, grid.h, 0), grid.h, 1)
    return uxx, uxy, uyy


@dataclass
class ContactSet:
    grid: BallGrid
    member: np.ndarray          # boolean over the bounding grid
    gradient_cap: float
    excess: float               # M = sup u - sup_boundary u
    slack: float

    def count(self):
        return int(np.sum(self.member))


def contact_set(grid: BallGrid, u) -> ContactSet:
    """Lower-touching-plane set under the gradient cap M/(3 diam).

    A point joins the set iff its 4th-order gradient obeys the cap and the
    tangent plane at the point stays (weakly, up to a quadratic slack) below
    the function over every grid point of the ball.
    """
    u = np.asarray(u, dtype=float)
    gx, gy = _gradient(grid, u)
    uxx, uxy, uyy = _hessian(grid, u)
    hess_sup = max(np.max(np.abs(w[grid.interior]))
                   for w in (uxx, uxy, uyy))
    slack = CONTACT_SLACK_C * grid.h ** 2 * hess_sup \
        + 1e-12 * max(1.0, float(np.max(np.abs(u[grid.inside]))))

    sup_in = float(np.max(u[grid.inside]))
    sup_bd = float(np.max(u[grid.boundary_band]))
    excess = sup_in - sup_bd
    cap = max(excess, 0.0) / (3.0 * 2.0 * grid.radius)

    gnorm = np.sqrt(gx ** 2 + gy ** 2)
    cand = grid.interior & (gnorm <= cap + 1e-14)
    member = np.zeros_like(cand)
    if not np.any(cand):
        return ContactSet(grid, member, cap, excess, slack)

    yx = grid.X[grid.inside]
    yy = grid.Y[grid.inside]
    uy = u[grid.inside]
    idx = np.argwhere(cand)
    flags = np.zeros(len(idx), dtype=bool)
    chunk = 256
    for start in range(0, len(idx), chunk):
        part = idx[start:start + chunk]
        cx = grid.X[part[:, 0], part[:, 1]][:, None]
        cy = grid.Y[part[:, 0], part[:, 1]][:, None]
        cu = u[part[:, 0], part[:, 1]][:, None]
        cgx = gx[part[:, 0], part[:, 1]][:, None]
        cgy = gy[part[:, 0], part[:, 1]][:, None]
        plane = cu + cgx * (yx[None, :] - cx) + cgy * (yy[None, :] - cy)
        flags[start:start + chunk] = np.all(
            uy[None, :] <= plane + slack, axis=1)
    member[idx[flags, 0], idx[flags, 1]] = True
    return ContactSet(grid, member, cap, excess, slack)


def _clamped_det(uxx, uxy, uyy):
    """det of -D^2 u with eigenvalues clamped to [0, inf)."""
    mean = -(uxx + uyy) / 2.0
    disc = np.sqrt(((uxx - uyy) / 2.0) ** 2 + uxy ** 2)
    lam1 = np.maximum(mean + disc, 0.0)
    lam2 = np.maximum(mean - disc, 0.0)
    return lam1 * lam2


def abp_check(grid: BallGrid, u, name="abp") -> CheckResult:
    """Ratio of the interior excess to the contact-set determinant mass.

    Vacuous pass when the excess M is nonpositive.  The reported value is
    rho = M / (integral of clamped det(-D^2 u) over the contact set)^(1/d),
    checked against an empirical family bound.
    """
    u = np.asarray(u, dtype=float)
    cs = contact_set(grid, u)
    site = np.unravel_index(int(np.argmax(np.where(grid.inside, u, -np.inf))),
                            u.shape)
    if cs.excess <= 0.0:
        return CheckResult(name=name, site=site, value=0.0,
                           bound=ABP_RATIO_BOUND, margin=ABP_RATIO_BOUND,
                           passed=True)
    uxx, uxy, uyy = _hessian(grid, u)
    det = _clamped_det(uxx, uxy, uyy)
    integral = grid.cell_volume() * float(np.sum(det[cs.member]))
    if integral <= 0.0:
        return CheckResult(name=name, site=site, value=np.inf,
                           bound=ABP_RATIO_BOUND, margin=-np.inf,
                           passed=False)
    ratio = cs.excess / integral ** (1.0 / grid.d)
    return CheckResult(name=name, site=site, value=ratio,
                       bound=ABP_RATIO_BOUND, margin=ABP_RATIO_BOUND - ratio,
                       passed=ratio <= ABP_RATIO_BOUND)


def hypothesis_norms(grid: BallGrid, a, f, g):
    """L^p norms entering the divergence-form sup bound, p = 3d/2 + 1.

    `a` is (a11, a12, a22) over the grid; lambda is its top eigenvalue.
    """
    p = 3 * grid.d / 2 + 1
    a11, a12, a22 = (np.asarray(w, dtype=float) for w in a)
    lam = (a11 + a22) / 2 + np.sqrt(((a11 - a22) / 2) ** 2 + a12 ** 2)
    vol = grid.cell_volume()
    mask = grid.inside

    def lp(w, q):
        return (vol * float(np.sum(np.abs(w[mask]) ** q))) ** (1.0 / q)

    return {
        "p": p,
        "lambda_p": lp(lam, p),
        "f_p2": lp(np.asarray(f, dtype=float), p / 2),
        "g_p2": lp(np.asarray(g, dtype=float), p / 2),
    }


def moser_supbound_check(grid: BallGrid, u, a, f, g,
                         name="moser") -> CheckResult:
    """sup over the half ball against the L^1 mass, divergence-form setting.

    Verifies div(a grad u) >= f u + g at interior points (up to an h^2
    slack) and reports sup_{B_{1/2}} u / (||u||_{L^1(B_1)} + 1) against an
    empirical family bound.
    """
    u = np.asarray(u, dtype=float)
    a11, a12, a22 = (np.asarray(w, dtype=float) for w in a)
    f = np.asarray(f, dtype=float)
    g = np.asarray(g, dtype=float)

    ux, uy = _gradient(grid, u)
    flux_x = a11 * ux + a12 * uy
    flux_y = a12 * ux + a22 * uy
    div = _d1(flux_x, grid.h, 0) + _d1(flux_y, grid.h, 1)
    deep = grid.interior
    scale = max(np.max(np.abs(w[grid.inside]))
                for w in (u, a11, a12, a22, f, g))
    slack = MOSER_SLACK_C * grid.h ** 2 * max(scale, 1.0)
    defect = (f * u + g - div)[deep]
    worst = float(np.max(defect)) if defect.size else 0.0
    if worst > slack:
        at = np.argwhere(deep)[int(np.argmax(defect))]
        raise HypothesisViolated(
            "divergence inequality fails by %.3e at grid point %s"
            % (worst, tuple(at)))

    half = grid.r <= grid.radius / 2 + 1e-12
    sup_half = float(np.max(u[half]))
    l1 = grid.cell_volume() * float(np.sum(np.abs(u[grid.inside])))
    ratio = sup_half / (l1 + 1.0)
    site = np.unravel_index(int(np.argmax(np.where(half, u, -np.inf))),
                            u.shape)
    return CheckResult(name=name, site=site, value=ratio,
                       bound=MOSER_RATIO_BOUND,
                       margin=MOSER_RATIO_BOUND - ratio,
                       passed=ratio <= MOSER_RATIO_BOUND)


def dump_ball_fields_csv(path, grid: BallGrid, fields):
    """Ball-domain fields in the shared CSV schema, tagged by domain.

    Line 1 is the header ``domain,d,h``, line 2 the values, line 3 the field
    names; then one row per bounding-grid point, first axis fastest.
    """
    names = list(fields)
    cols = [np.ravel(np.asarray(fields[name], dtype=float), order="F")
            for name in names]
    with open(path, "w") as fh:
        fh.write("domain,d,h\n")
        fh.write("ball,%d,%.17g\n" % (grid.d, grid.h))
        fh.write(",".join(names) + "\n")
        np.savetxt(fh, np.column_stack(cols), delimiter=",", fmt="%.17g")
