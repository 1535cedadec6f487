"""Estimate harness: inequality and energy checks for metric states.

Max-principle statements are checked at located discrete extrema with a
second-order slack in the grid spacing; every check derived under the
scalar-curvature equation carries a twist correction so it remains exact
on states that do not solve the coupled system.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .lattice import ScalarField, integrate
from .kahler import BackgroundGeometry, MetricState, assemble, grad_norms, laplace_phi

TOL_VOL = 1e-8
TOL_INT = 1e-7
SLACK_C = 100.0

__all__ = [
    "NotSolved",
    "DegenerateInput",
    "NotPsh",
    "PathNotKahler",
    "CheckResult",
    "EstimateReport",
    "slack",
    "entropy",
    "volume_defect",
    "pointwise_inequalities",
    "prop21_check",
    "thm21_check",
    "thm22_check",
    "w2p_integral",
    "gamma_p",
    "p_n_bound",
    "l1_gradF_check",
    "kenergy",
    "alpha_integral",
    "thm52_quantity",
    "build_report",
]


class NotSolved(Exception):
    """State does not satisfy the scalar-curvature equation closely enough."""


class DegenerateInput(Exception):
    """A check is vacuous for this input (e.g. constant potential)."""


class NotPsh(Exception):
    """Potential is not plurisubharmonic relative to the background."""


class PathNotKahler(Exception):
    """The linear path t*phi leaves the Kahler cone."""


def slack(N: int, scale: float = 1.0) -> float:
    """Extremum-location slack: second order in the grid spacing."""
    return SLACK_C * float(N) ** -2.0 * max(scale, 1.0)


@dataclass
class CheckResult:
    name: str
    site: tuple
    value: float
    bound: float
    margin: float
    passed: bool


@dataclass
class EstimateReport:
    entropy: float
    sup_phi: float
    osc_phi: float
    sup_grad_phi: float
    inf_F: float
    sup_F: float
    sup_ratio: float
    sup_lap: float
    w2p: dict
    checks: list = field(default_factory=list)


def _argmin_site(values):
    """Lattice index of the minimum; first occurrence = lexicographic."""
    return tuple(int(i) for i in
                 np.unravel_index(int(np.argmin(values)), values.shape))


def _argmax_site(values):
    return tuple(int(i) for i in
                 np.unravel_index(int(np.argmax(values)), values.shape))


def entropy(state: MetricState) -> float:
    """Relative entropy of the deformed volume form: integral of F e^F."""
    bg = state.background
    w = ScalarField(state.lattice, bg.det_g)
    return integrate(ScalarField(state.lattice,
                                 state.F.values * np.exp(state.F.values)), w)


def volume_defect(state: MetricState) -> float:
    """| integral of e^F dvol_g  -  vol(g) |; conserved by the Hessian form."""
    bg = state.background
    w = ScalarField(state.lattice, bg.det_g)
    v = integrate(ScalarField(state.lattice, np.exp(state.F.values)), w)
    return abs(v - bg.volume())


def pointwise_inequalities(state: MetricState) -> dict:
    """Max violation of each pointwise inequality; all should be ~0.

    Inequalities in terms of the relative eigenvalues e_i of g^{-1} g_phi:
    arithmetic-geometric mean, the reciprocal-product bound, the trace
    bound n + lap >= n e^{F/n}, and (for n=2) the iteration chain step.
    """
    n = state.lattice.n
    eig = np.stack(state.eig)
    eF = np.exp(state.F.values)
    tr = eig.sum(axis=0)
    inv_sum = (1.0 / eig).sum(axis=0)
    out = {}
    # (1/n) sum 1/e_i >= (prod e_i)^{-1/n} = e^{-F/n}
    out["am_gm"] = float(np.maximum(
        eF ** (-1.0 / n) - inv_sum / n, 0.0).max())
    # 1/e_i <= e^{-F} (n + lap)^{n-1}
    out["recip_product"] = float(np.maximum(
        1.0 / eig - (tr ** (n - 1) / eF)[None], 0.0).max())
    # n + lap >= n e^{F/n}
    out["trace_lower"] = float(np.maximum(
        n * eF ** (1.0 / n) - tr, 0.0).max())
    if n >= 2:
        # (n+lap) sum 1/e_i >= e^{-F/(n-1)} (n+lap)^{1+1/(n-1)}
        out["iteration_chain"] = float(np.maximum(
            eF ** (-1.0 / (n - 1)) * tr ** (1.0 + 1.0 / (n - 1))
            - tr * inv_sum, 0.0).max())
    # exact eigenvalue-determinant identity: prod e_i = e^F
    out["det_identity"] = float(
        np.abs(np.prod(eig, axis=0) - eF).max() / max(eF.max(), 1.0))
    return out


def _c21(bg: BackgroundGeometry) -> float:
    ric_max = bg.ric_eig_max if bg.rho0.values.any() else 0.0
    return 2.0 * ric_max + 2.0 * abs(bg.R_bar) / bg.lattice.n + 1.0


def prop21_check(state: MetricState) -> CheckResult:
    """Lower bound for F from the minimum of F + C*phi."""
    n = state.lattice.n
    N = state.lattice.N
    C = _c21(state.background)
    comb = state.F.values + C * state.phi.values
    site = _argmin_site(comb)
    eFn = math.exp(-state.F.values[site] / n)
    tw = state.twist.values[site]
    # 0 <= 2Cn - (nC/2) e^{-F/n}(p0) + twist(p0), rearranged
    value = (n * C / 2.0) * eFn - 2.0 * C * n - tw
    sc = max(1.0, float(np.abs(comb).max()), abs(tw))
    s = slack(N, sc)
    ok = value <= s
    # implied global bound F >= -n log 4 - C osc(phi), up to the same slack
    osc = float(state.phi.values.max() - state.phi.values.min())
    implied = -n * math.log(4.0) - C * osc
    ok = ok and (float(state.F.values.min()) >= implied - s)
    return CheckResult("prop21", site, float(value), 0.0,
                       float(s - value), bool(ok))


def thm21_check(state: MetricState) -> CheckResult:
    """Upper bound for F at the maximum of e^{F-lam*phi}(K+|grad phi|^2)."""
    n = state.lattice.n
    N = state.lattice.N
    bg = state.background
    g2, _ = grad_norms(state, state.phi)
    sup_g2 = float(g2.values.max())
    if sup_g2 == 0.0:
        raise DegenerateInput("phi is constant; gradient bound is vacuous")
    curved = bool(bg.rho0.values.any())
    ric_min = bg.ric_eig_min if curved else 0.0
    lam = 2.0 + max(0.0, -ric_min)          # lam + Ric eigenvalues > 1
    c221 = max(0.0, -bg.bisec_lower) if curved else 0.0
    K = 1.01 * max(12.0, c221) * sup_g2
    v = np.exp(state.F.values - lam * state.phi.values) * (K + g2.values)
    site = _argmax_site(v)
    B = (abs(bg.R_bar) + lam * n) * (K + sup_g2) + 1.5 * n
    c223 = B / K
    c224 = 4.0 * (K + sup_g2) / n
    tw = state.twist.values[site]
    value = math.exp(state.F.values[site] / n) / c224 - c223 + tw
    sc = max(1.0, float(np.abs(v).max()))
    s = slack(N, sc)
    return CheckResult("thm21", site, float(value), 0.0,
                       float(s - value), bool(value <= s))


def thm22_check(state: MetricState) -> CheckResult:
    """Gradient-to-volume-ratio bound at the maximum of e^A(|grad|^2+K)."""
    n = state.lattice.n
    N = state.lattice.N
    bg = state.background
    curved = bool(bg.rho0.values.any())
    c221 = max(0.0, -bg.bisec_lower) if curved else 0.0
    sup_ric = bg.ric_sup if curved else 0.0
    phi0 = float(np.abs(state.phi.values).max())
    lam = 10.0 * (sup_ric + phi0 + c221 + 1.0)
    K = 10.0
    g2, _ = grad_norms(state, state.phi)
    A = -(state.F.values + lam * state.phi.values) + 0.5 * state.phi.values ** 2
    u = np.exp(A) * (g2.values + K)
    site = _argmax_site(u)
    c233 = (abs(bg.R_bar) + lam * n + n * phi0) * K + 2.0 * lam + 2.0 * phi0
    eF = math.exp(-state.F.values[site])
    q = eF * g2.values[site]
    tw = state.twist.values[site]
    value = (q ** (1.0 + 1.0 / n) - c233 * q - c233 * eF
             - tw * eF * (g2.values[site] + K))
    sc = max(1.0, float(np.abs(u).max()))
    s = slack(N, sc)
    return CheckResult("thm22", site, float(value), 0.0,
                       float(s - value), bool(value <= s))


def gamma_p(p: float, n: int) -> float:
    return max((p + 1.0) * (p + 2.0), n * p)


def p_n_bound(n: int) -> int:
    return (3 * n - 3) * (4 * n + 1)


def w2p_integral(state: MetricState, p: float, alpha: float) -> float:
    """Weighted trace integral: e^{-alpha F} (n + lap)^p against dvol_g."""
    if p <= 0 or alpha < 0:
        raise ValueError("need p > 0 and alpha >= 0")
    bg = state.background
    tr = bg.g.trace_inv(state.g_phi)
    vals = np.exp(-alpha * state.F.values) * tr ** p
    return integrate(ScalarField(state.lattice, vals),
                     ScalarField(state.lattice, bg.det_g))


def l1_gradF_check(state: MetricState, tol: float = TOL_INT,
                   max_twist: float = 1e-6) -> CheckResult:
    """Integrated gradient identity for F on solved states."""
    tw_sup = float(np.abs(state.twist.values).max())
    if tw_sup > max_twist:
        raise NotSolved(f"twist {tw_sup:.3e} exceeds {max_twist:.1e}")
    bg = state.background
    lat = state.lattice
    w = ScalarField(lat, bg.det_g)
    eF = np.exp(state.F.values)
    _, gphi2 = grad_norms(state, state.F)
    lhs = integrate(ScalarField(lat, eF * gphi2.values), w)
    tr_ric = state.g_phi.trace_inv(bg.ricci)
    rhs = integrate(ScalarField(
        lat, eF * state.F.values * (bg.R_bar - tr_ric)), w)
    diff = abs(lhs - rhs)
    return CheckResult("l1_gradF", (0,) * (2 * lat.n), float(diff),
                       float(tol), float(tol - diff), bool(diff <= tol))


def kenergy(background: BackgroundGeometry, phi: ScalarField,
            steps: int = 32, with_error: bool = False):
    """Mabuchi functional along the linear path t -> t*phi.

    Entropy part at t=1 plus the path integral of the Ricci pairing,
    composite trapezoid in t with Richardson extrapolation from half the
    steps.  Raises PathNotKahler if positivity fails along the path.
    """
    if steps < 2 or steps % 2:
        raise ValueError("steps must be even and >= 2")
    lat = background.lattice
    w = ScalarField(lat, background.det_g)
    flat_ric = not background.rho0.values.any()

    def integrand(t):
        try:
            st = assemble(background, ScalarField(lat, t * phi.values))
        except Exception as e:
            raise PathNotKahler(f"path leaves the cone at t={t:g}") from e
        if flat_ric:
            return 0.0, st
        tr_ric = st.g_phi.trace_inv(background.ricci)
        vals = phi.values * (background.R_bar - tr_ric) * np.exp(st.F.values)
        return integrate(ScalarField(lat, vals), w), st

    def trap(m):
        ts = np.linspace(0.0, 1.0, m + 1)
        vals = []
        last = None
        for t in ts:
            v, st = integrand(float(t))
            vals.append(v)
            last = st
        ent = entropy(last)
        return ent + float(np.trapezoid(vals, ts))

    coarse = trap(steps // 2)
    fine = trap(steps)
    value = fine + (fine - coarse) / 3.0
    if with_error:
        return value, abs(fine - coarse) / 3.0
    return value


def alpha_integral(phi: ScalarField, alpha: float,
                   background: BackgroundGeometry | None = None) -> float:
    """Exponential integrability of sup-normalized psh potentials."""
    lat = phi.lattice
    bg = background or BackgroundGeometry.flat(lat)
    try:
        assemble(bg, phi)
    except Exception as e:
        raise NotPsh("phi is not psh within the positivity margin") from e
    shifted = phi.values - phi.values.max()
    return integrate(ScalarField(lat, np.exp(-alpha * shifted)),
                     ScalarField(lat, bg.det_g))


def thm52_quantity(state: MetricState, psi: ScalarField,
                   eps: float) -> CheckResult:
    """Sup of F + eps*psi - 2(1+sup|Ric|)phi, reported with the weighted
    volume budget (no inequality asserted; the bound is existential)."""
    bg = state.background
    lat = state.lattice
    sup_ric = bg.ric_sup if bg.rho0.values.any() else 0.0
    combo = (state.F.values + eps * psi.values
             - 2.0 * (1.0 + sup_ric) * state.phi.values)
    site = _argmax_site(combo)
    eF = np.exp(state.F.values)
    budget = integrate(
        ScalarField(lat, eF * np.sqrt(state.F.values ** 2 + 1.0)),
        ScalarField(lat, bg.det_g))
    value = float(combo[site])
    return CheckResult("thm52", site, value, float(budget),
                       float(budget - value), True)


def build_report(state: MetricState, p_values=(2.0, 4.0),
                 with_max_principle: bool = True) -> EstimateReport:
    g2, _ = grad_norms(state, state.phi)
    eF = np.exp(state.F.values)
    tr = state.background.g.trace_inv(state.g_phi)
    w2p = {}
    for p in p_values:
        a = gamma_p(p, state.lattice.n)
        w2p[(p, a)] = w2p_integral(state, p, a)
    checks = []
    if with_max_principle:
        checks.append(prop21_check(state))
        try:
            checks.append(thm21_check(state))
        except DegenerateInput:
            pass
        checks.append(thm22_check(state))
    return EstimateReport(
        entropy=entropy(state),
        sup_phi=float(state.phi.values.max()),
        osc_phi=float(state.phi.values.max() - state.phi.values.min()),
        sup_grad_phi=float(np.sqrt(g2.values.max())),
        inf_F=float(state.F.values.min()),
        sup_F=float(state.F.values.max()),
        sup_ratio=float((g2.values / eF).max()),
        sup_lap=float(tr.max()),
        w2p=w2p,
        checks=checks,
    )
