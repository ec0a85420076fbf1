"""Offline synthesis of explicit MPC feedback laws with certified sup-norm error.

The toolkit turns a finite-horizon optimal control problem plus a uniform
error margin into a deployable lookup policy: sample the optimal feedback on
a grid, extend it past the feasible boundary, and evaluate it anywhere by a
truncated kernel sum whose total error is budgeted below the margin ahead
of time.
"""

__version__ = "0.1.0"

from .budget import ApproximationBudget, certified_bound, select_budget
from .errors import (
    BudgetInfeasibleError,
    ConfigError,
    EmptyNetError,
    EstimationError,
    IncompleteFieldError,
    KernelError,
    QuifsError,
    SynthesisError,
    TableFormatError,
)
from .extend import (
    FeasibleNet,
    LipschitzEstimate,
    dilated_target_box,
    estimate_lipschitz,
    lipschitz_extend,
)
from .interp import (
    LatticeField,
    Stencil,
    calibrate_truncation_constant,
    parent_interpolate,
    stencil,
    truncated_interpolate,
)
from .kernels import (
    GeneratingFunction,
    MomentReport,
    catalog,
    cgamma,
    saturation_estimate,
    verify_moments,
)
from .dynamics import LinearDynamics, NonlinearDynamics
from .mpc import (
    Box,
    Ellipsoid,
    HPolytope,
    MpcProblem,
    OracleResult,
    SolverOptions,
    riccati_reference,
    sample_net,
    solve_at_state,
    solve_at_states,
)
from .synth import (
    CertificationReport,
    ExplicitPolicy,
    certify,
    evaluate_policy,
    evaluate_policy_batch,
    synthesize,
)
from .sim import (
    StabilityReport,
    Trajectory,
    compare_with_online_rhc,
    simulate_closed_loop,
)
