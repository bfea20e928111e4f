"""sgdflow: SGD and momentum SGD under time-varying schedules, their
continuous ODE/SDE surrogates, and weak-error order verification."""

from .augment import AugmentedSystem, DegenerateMomentumError, step_equivalence_check
from .continuous import (
    SurrogateSpec,
    ValueEstimate,
    ValueFunctionProbe,
    capital_phi_density,
    capital_phi_profile,
    fk_residual,
    leading_error_integral,
    linear_sde_moments,
    ode_flow,
    ode_path,
    phi_density,
    sde_endpoint_batch,
    sde_sample,
    second_order_drift,
    value_function,
)
from .discrete import (
    DiscreteConfig,
    DivergenceError,
    Trajectory,
    bootstrap_first_iterate,
    member_stream,
    momentum_step,
    noise_stream,
    run_trajectory,
    sgd_step,
    simulate_batch,
)
from .observables import OBSERVABLES, Observable, make_observable
from .problems import (
    GradientFamily,
    NotPSDError,
    QuadraticFamilySpec,
    ou_family,
    principal_sqrt,
    quadratic_family,
    random_quadratic_family,
    scalar_affine_family,
    tanh_family,
    two_member_linear,
)
from .schedules import DiagonalRateMatrix, Schedule, rate_matrix, validate
from .weakerror import (
    ConvergenceFit,
    GridPointResult,
    WeakErrorReport,
    convergence_fit,
    estimate_discrete_expectation,
    exact_discrete_expectation,
    expansion_residual,
    study_grid,
    surrogate_expectation,
    weak_error,
)

__version__ = "0.1.0"
