"""Monte Carlo solver and verification harness for systems of BSDEs with
diagonally quadratic generators."""

__version__ = "0.1.0"

from .bmo import (
    BmoError,
    bmo2_norm,
    girsanov_bmo_equivalence,
    john_nirenberg_check,
    make_battery,
    reverse_holder_check,
    stochastic_exponential,
)
from .condexp import RegressionBasis, RegressionError, fit, fitted_se, predict
from .constants import (
    GlobalSolveParameters,
    LocalSolveParameters,
    ParameterError,
    StructuralConstants,
    capital_phi,
    find_p_for_threshold,
    global_parameters,
    local_parameters,
    phi,
    phi_double_prime,
    phi_prime,
    reverse_holder_constant,
)
from .globalsolve import (
    GlobalSolution,
    StitchError,
    StitchPlan,
    global_solve,
    plan_stitch,
    uniqueness_probe,
    z_bmo_report,
)
from .instances import (
    BUILTIN_INSTANCES,
    InstanceError,
    InstanceSpec,
    LEMMA_BATTERY,
    builtin_ids,
    builtin_instance,
    load_instance,
    parse_instance,
    terminal_values,
)
from .paths import PathEnsemble, TimeGrid, make_grid, simulate_brownian, window_ensemble
from .picard import (
    BsdeSolution,
    PicardConvergenceError,
    SystemGenerator,
    contraction_probe,
    local_solve,
)
from .scalarq import (
    ScalarDivergenceError,
    ScalarGenerator,
    a_priori_check,
    cole_hopf_solve,
    comparison_check,
    pure_quadratic,
    solve_scalar,
)
