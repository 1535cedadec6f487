"""Numerical laboratory for constant scalar curvature Kahler metrics on flat tori."""

from .lattice import (
    ComplexField,
    HermitianField,
    Lattice,
    ScalarField,
    complex_hessian,
    derive,
    dump_fields_csv,
    integrate,
    random_band_limited,
)
from .kahler import (
    BackgroundGeometry,
    MetricState,
    NotKahler,
    assemble,
    curvature_contractions,
    grad_norms,
    laplace_phi,
)
from .identities import (
    IdentityCheck,
    StateDerivs,
    run_identity,
    tol_id,
)
from .estimates import (
    CheckResult,
    EstimateReport,
    build_report,
    entropy,
    kenergy,
    l1_gradF_check,
    prop21_check,
    thm21_check,
    thm22_check,
    w2p_integral,
)
from .solver import (
    LostPositivity,
    NotConverged,
    SolveResult,
    SolverConfig,
    residuals,
    solve_csck,
    solve_ma,
)
from .localanalysis import (
    BallGrid,
    abp_check,
    contact_set,
    moser_supbound_check,
)

__version__ = "0.1.0"
