"""Locally exact control synthesis for the quasilinear diffusion equation.

Library layout:

 - geometry, weights: domains, control regions, auxiliary function psi,
   Carleman weight fields;
 - discretize: grids, sparse elliptic operators, norms, serialization;
 - nonlinearity: diffusion models, globalized extensions, stationary states;
 - solvers: implicit-Euler forward/linearized/adjoint marches;
 - control: the weighted tracking functional, its adjoint gradient, and
   the conjugate-gradient minimizer with terminal refinement;
 - fixedpoint: the Picard outer loop and the two-phase strategy;
 - diagnostics, experiment, figures, cli: estimate verification, the
   experiment runner, figure rendering, and the command line.
"""

from .geometry import ControlRegion, Grid, SpatialDomain
from .weights import (
    CarlemanParameters,
    WeightFields,
    WeightFunctionPsi,
    construct_psi,
    evaluate_weights,
    verify_psi,
)
from .discretize import (
    ScalarField,
    SpaceTimeField,
    SparseOperator,
    assemble_elliptic,
    laplacian,
    lq_norm,
    weighted_spacetime_norm,
)
from .nonlinearity import (
    NonlinearityModel,
    StationaryState,
    cubic_model,
    globalize,
    linear_model,
    manufactured_forcing,
    model_from_config,
    porous_medium_model,
    solve_stationary,
)
from .solvers import (
    AdjointTrajectory,
    TimeGrid,
    Trajectory,
    solve_adjoint,
    solve_linearized,
    solve_quasilinear_controlled,
    solve_uncontrolled,
)
from .control import (
    ControlProblem,
    OptimalityState,
    PenalizedProblem,
    TrackingTarget,
    build_control_problem,
    functional_value,
    gradient_via_adjoint,
    minimize,
    penalized_minimize,
    reconstruct_control,
)
from .fixedpoint import (
    BMembership,
    PicardState,
    ProblemGeometry,
    QiLadder,
    TwoPhasePlan,
    check_membership,
    picard_run,
    qi_ladder,
    two_phase_run,
)
from .diagnostics import (
    CarlemanReport,
    EstimateReport,
    carleman_check,
    observability_check,
    smoothing_scan,
    theorem_estimates,
)
from .experiment import run_experiment, run_sweep

__version__ = "0.1.0"
