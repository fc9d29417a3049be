"""Stochastic Galerkin and NGO-based solvers for highly oscillatory
transport equations with random coefficients."""

from .chaos import (
    ChaosBasis,
    GalerkinOperator,
    QuadratureRule,
    assemble_triple_tensor,
    assemble_weighted_matrix,
    build_basis,
    gauss_rule,
    galerkin_nonlinear,
    moments_from_coeffs,
    project_function,
)
from .errors import (
    ConfigurationError,
    ExtrapolationError,
    GridMismatchError,
    NonlinearEvaluationError,
    OscgpcError,
    PhaseInversionError,
    SingularWeightError,
    SolverError,
)
from .spectral import (
    PeriodicGrid,
    backward_euler_tau,
    exact_advect_fourier,
    fourier_derivative,
    linear_interp,
    rk3_transport_step,
    rk4_step,
    trig_interpolate,
)
from .scalar import (
    ScalarConfig,
    ScalarProblem,
    chapman_enskog_profile,
    prepare_initial_V,
    reconstruct_n1,
    reconstruct_n2,
    solve_collocation,
    solve_direct,
    solve_n1,
    solve_n2,
    solve_phase_scalar,
)

__version__ = "0.1.0"
