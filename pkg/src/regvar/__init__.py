"""regvar: stochastic calculus by smoothing, at desk scale.

Epsilon-regularization estimators for covariation and quadratic variation,
window processes paired against measure-type test functionals, a robust
replication engine for vanilla payoffs, and a diagonal Galerkin stack for
Hilbert-space Kolmogorov equations with Monte Carlo value functions.
"""

from .grid_paths import (
    Grid,
    PathEnsemble,
    ProcessSpec,
    SamplePath,
    ensemble,
    eval_extended,
    simulate,
)
from .regcalc import (
    EpsSchedule,
    EstimateSeries,
    QVTarget,
    covariation,
    covariation_eps,
    forward_integral,
    forward_integral_eps,
    improper_forward_integral,
    integration_by_parts_residual,
    quadratic_variation,
    two_var_norm,
    v2psi_check,
)
from .chi_window import (
    PointEval,
    SquareMeasure,
    SquaredMean,
    SquaredNorm,
    WindowPath,
    chi_qv_eps,
    chi_qv_formula,
    chi_qv_series,
    functional_derivatives,
    pair_measure_with_square_increment,
    window_at,
)
from .ito_verify import CF12, ItoReport, banach_ito_report, ito_residual, scalar_ito_report
from .replicate import (
    HedgeReport,
    VanillaPayoff,
    default_model_zoo,
    hedge_process,
    lift_to_window,
    replicate_payoff,
    solve_vanilla,
)
from .hilbert_kolmo import (
    CoeffFns,
    GalerkinSpace,
    KolmoProblem,
    LinearQuadraticSolution,
    OperatorMat,
    decomposition_check,
    kolmogorov_mc,
    martingale_bracket_Q_phi,
    simulate_convolution,
    simulate_q_wiener,
)

__version__ = "0.1.0"
