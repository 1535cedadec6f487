"""Newton solvers for the Monge-Ampere and coupled scalar-curvature systems.

The coupled system is split in two: an outer linear elliptic solve for the
log-density F given the potential, and an inner fully nonlinear solve for the
potential given F.  Both levels share one preconditioned conjugate-gradient
kernel whose preconditioner is a constant-coefficient Laplacian inverted
spectrally.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .lattice import Lattice, ScalarField, complex_hessian, integrate
from .kahler import (
    BackgroundGeometry,
    MetricState,
    NotKahler,
    assemble,
    laplace_phi,
)

DAMPING_FLOOR = 1.0 / 64.0


class NotConverged(Exception):
    """Iteration budget exhausted; carries the residual history."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = list(history or [])


class LostPositivity(Exception):
    """A trial step left the Kahler cone and backtracking hit the floor."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = list(history or [])


@dataclass
class SolverConfig:
    max_iters: int = 50
    damping: float = 1.0
    tol_residual: float = 1e-10
    continuation_steps: int = 1
    linear_tol: float = 1e-2
    linear_max_iters: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.tol_residual <= 0:
            raise ValueError("tol_residual must be positive")
        if self.continuation_steps < 1:
            raise ValueError("continuation_steps must be at least 1")
        if not 0.0 < self.damping <= 1.0:
            raise ValueError("damping must lie in (0, 1]")


@dataclass
class SolveResult:
    phi: ScalarField
    F: ScalarField
    residual_ma: float
    residual_scal: float
    iterations: int
    converged: bool
    residual_history: list = field(default_factory=list)
    history_ma: list = field(default_factory=list)
    history_scal: list = field(default_factory=list)


# -- linear kernel ----------------------------------------------------------


def _precond_symbol(lattice: Lattice, gpi):
    """Fourier symbol of the averaged-coefficient Laplacian (nonpositive)."""
    n = lattice.n
    sym = 0.0
    for i in range(n):
        c = float(np.mean(np.real(gpi.entry(i, i))))
        mr, _ = lattice.mult_dd(i, i)
        sym = sym + c * mr
    if n == 2:
        c01 = complex(np.mean(gpi.entry(0, 1)))
        mr, mi = lattice.mult_dd(0, 1)
        # entry(1,0) of the inverse pairs with the (0,1) derivative and
        # conversely; the two contributions are conjugate.
        sym = sym + 2.0 * (np.real(c01) * mr + np.imag(c01) * mi)
    return sym


def _pcg_laplace(state: MetricState, rhs, tol, max_iters, x0=None,
                 sup_tol=None):
    """Solve -Delta_phi x = -rhs (i.e. Delta_phi x = rhs) by weighted PCG.

    The operator is self-adjoint in the L2(dvol_phi) inner product and
    positive on mean-free fields.  `rhs` is projected onto the solvable
    complement of the constant kernel; the returned field has zero lattice
    mean.  Returns (x, relative_residual, iterations).
    """
    lat = state.lattice
    w = state.det_g_phi
    wmean = float(np.mean(w))

    def project(v):
        return v - float(np.mean(v * w)) / wmean

    def inner(a, b):
        return float(np.mean(a * b * w))

    gpi = state.g_phi_inv

    def apply_op(v):
        h = complex_hessian(ScalarField(lat, v))
        out = 0.0
        for i in range(lat.n):
            for j in range(lat.n):
                out = out + gpi.entry(j, i) * h.entry(i, j)
        return -np.real(out)

    sym = _precond_symbol(lat, state.g_phi_inv)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv_sym = np.where(sym < 0.0, -1.0 / sym, 0.0)

    def precond(v):
        return lat.rspec_inv(inv_sym * lat.rspec(v))

    b = project(-np.asarray(rhs))
    bnorm = np.sqrt(max(inner(b, b), 0.0))
    if bnorm == 0.0:
        return np.zeros(lat.shape), 0.0, 0

    if x0 is not None:
        x = np.array(x0, dtype=float)
        x -= np.mean(x)
        r = project(b - apply_op(x))
    else:
        x = np.zeros(lat.shape)
        r = b.copy()
    z = precond(r)
    p = z.copy()
    rho = inner(r, z)

    def unfinished(r, rel):
        if sup_tol is not None:
            return float(np.max(np.abs(r))) > sup_tol
        return rel > tol

    rel = np.sqrt(max(inner(r, r), 0.0)) / bnorm
    it = 0
    stall = 0
    best_sup = float(np.max(np.abs(r)))
    while unfinished(r, rel) and it < max_iters and stall < 8:
        ap = apply_op(p)
        denom = inner(p, ap)
        if denom <= 0.0:
            break
        alpha = rho / denom
        x += alpha * p
        r -= alpha * ap
        r = project(r)
        z = precond(r)
        rho_new = inner(r, z)
        if rho == 0.0 or rho_new == 0.0:
            rel = np.sqrt(max(inner(r, r), 0.0)) / bnorm
            it += 1
            break
        p = z + (rho_new / rho) * p
        rho = rho_new
        rel = np.sqrt(max(inner(r, r), 0.0)) / bnorm
        sup_now = float(np.max(np.abs(r)))
        if sup_now < 0.9 * best_sup:
            best_sup, stall = sup_now, 0
        else:
            stall += 1
        it += 1
    x -= np.mean(x)
    return x, rel, it


# -- Monge-Ampere -----------------------------------------------------------


def _ma_residual(background, phi_vals, target):
    """(state, residual values, sup) for log det(g_phi) - log det g = target."""
    state = assemble(background, ScalarField(background.lattice, phi_vals))
    res = state.F.values - target
    return state, res, float(np.max(np.abs(res)))


def solve_ma(background: BackgroundGeometry, density: ScalarField,
             config: SolverConfig | None = None, history=None,
             phi0: ScalarField | None = None) -> ScalarField:
    """Solve det(g + dd psi) = c * density * det g, normalized, sup psi = 0.

    The density is rescaled internally so the equation is solvable on the
    closed torus; the solution is unchanged by a positive rescaling of the
    input.  Damped Newton with the weighted PCG kernel; every accepted step
    strictly decreases the sup-norm residual.
    """
    if config is None:
        config = SolverConfig()
    lat = background.lattice
    dens = np.asarray(density.values if isinstance(density, ScalarField)
                      else density, dtype=float)
    if np.min(dens) <= 0.0:
        raise ValueError("density must be positive pointwise")
    scale = integrate(dens, weight=background.det_g) / background.volume()
    target = np.log(dens / scale)

    if history is None:
        history = []
    phi = np.zeros(lat.shape) if phi0 is None else phi0.values - phi0.mean()
    try:
        state, res, sup = _ma_residual(background, phi, target)
    except NotKahler:
        raise LostPositivity("initial guess is outside the Kahler cone",
                             history)
    history.append(sup)
    step = config.damping
    accepts = 0
    for _ in range(config.max_iters):
        if sup <= config.tol_residual:
            break
        lin_tol = max(min(config.linear_tol, sup), 1e-13)
        direction, _, _ = _pcg_laplace(state, -res, lin_tol,
                                       config.linear_max_iters)
        state = None  # backtracking only needs phi/res/sup; free the metric
        while True:
            trial = phi + step * direction
            trial -= np.mean(trial)
            try:
                t_state, t_res, t_sup = _ma_residual(background, trial, target)
            except NotKahler:
                step *= 0.5
                accepts = 0
                if step < DAMPING_FLOOR:
                    raise LostPositivity(
                        "Newton trial left the Kahler cone at minimum step",
                        history)
                continue
            if t_sup < sup:
                phi, state, res, sup = trial, t_state, t_res, t_sup
                history.append(sup)
                accepts += 1
                if accepts >= 3:
                    step = config.damping
                    accepts = 0
                break
            step *= 0.5
            accepts = 0
            if step < DAMPING_FLOOR:
                raise NotConverged(
                    "sup-norm residual stalled at %.3e" % sup, history)
    else:
        if sup > config.tol_residual:
            raise NotConverged(
                "residual %.3e after %d iterations" % (sup, config.max_iters),
                history)
    return ScalarField(lat, phi - float(np.max(phi)))


# -- coupled system ---------------------------------------------------------


def residuals(state: MetricState, F: ScalarField | None = None):
    """Sup-norms of the two equation residuals for the pair (phi, F).

    With F omitted the density equation holds by construction and the first
    entry is zero; the second is the scalar-curvature twist of the state.
    """
    if F is None:
        F = state.F
        res_ma = 0.0
    else:
        res_ma = float(np.max(np.abs(state.F.values - F.values)))
    lap = laplace_phi(state, F)
    tr_ric = state.g_phi.trace_inv(state.background.ricci)
    res_scal = float(np.max(np.abs(
        lap.values + state.background.R_bar - tr_ric)))
    return res_ma, res_scal


def _solve_F(state: MetricState, config, sup_tol, x0=None):
    """Linear elliptic solve for F given the potential; zero lattice mean."""
    rhs = state.g_phi.trace_inv(state.background.ricci) \
        - state.background.R_bar
    vals, _, _ = _pcg_laplace(state, rhs, config.linear_tol,
                              config.linear_max_iters, x0=x0,
                              sup_tol=sup_tol)
    # shift so exp(F) dvol_g has total mass vol: the normalization under
    # which the density equation reproduces F exactly at a solved pair
    bg = state.background
    shift = np.log(integrate(np.exp(vals), weight=bg.det_g) / bg.volume())
    return ScalarField(state.lattice, vals - shift)


def solve_csck(background: BackgroundGeometry,
               config: SolverConfig | None = None,
               phi0: ScalarField | None = None) -> SolveResult:
    """Alternating two-level solve of the coupled system, R_bar = 0.

    A continuation loop scales the background potential up to its final
    amplitude; at each level the outer step solves the linear equation for F
    and the inner step re-solves the density equation for the potential.
    """
    if config is None:
        config = SolverConfig()
    lat = background.lattice
    if background.R_bar != 0.0:
        raise ValueError("torus classes require R_bar = 0")

    rho0 = background.rho0
    phi = np.zeros(lat.shape)
    if phi0 is not None:
        phi = phi0.values - phi0.mean()
    history = []
    hist_ma = []
    hist_scal = []
    total_outer = 0
    F = ScalarField.constant(lat)
    res_ma = res_scal = 0.0
    converged = True

    steps = config.continuation_steps if rho0 is not None else 1
    for level in range(1, steps + 1):
        t = level / steps
        if rho0 is None or not np.any(rho0.values):
            bg_t = BackgroundGeometry.flat(lat)
        elif t == 1.0:
            bg_t = background
        else:
            bg_t = BackgroundGeometry.from_potential(
                ScalarField(lat, t * rho0.values), R_bar=background.R_bar)

        converged = False
        for _ in range(config.max_iters):
            state = assemble(bg_t, ScalarField(lat, phi))
            F = _solve_F(state, config, 0.3 * config.tol_residual,
                         x0=F.values)
            res_ma, res_scal = residuals(state, F)
            history.append(max(res_ma, res_scal))
            hist_ma.append(res_ma)
            hist_scal.append(res_scal)
            total_outer += 1
            if max(res_ma, res_scal) <= config.tol_residual:
                converged = True
                break
            psi = solve_ma(bg_t, ScalarField(lat, np.exp(F.values)),
                           config, phi0=ScalarField(lat, phi))
            phi = psi.values - np.mean(psi.values)
        if not converged and level == steps:
            raise NotConverged(
                "outer iteration stalled at residuals (%.3e, %.3e)"
                % (res_ma, res_scal), history)

    return SolveResult(
        phi=ScalarField(lat, phi),
        F=F,
        residual_ma=res_ma,
        residual_scal=res_scal,
        iterations=total_outer,
        converged=converged,
        residual_history=history,
        history_ma=hist_ma,
        history_scal=hist_scal,
    )


def dump_residual_history(path, result: SolveResult):
    """CSV of (iteration, residual_ma, residual_scal)."""
    with open(path, "w") as fh:
        fh.write("iteration,residual_ma,residual_scal\n")
        for k, (a, b) in enumerate(zip(result.history_ma,
                                       result.history_scal)):
            fh.write("%d,%.17g,%.17g\n" % (k, a, b))
