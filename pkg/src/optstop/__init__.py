"""Perpetual optimal stopping for one-dimensional diffusions."""

from .errors import (ConfigError, DomainError, NumericalFailure, OptStopError,
                     PreconditionError, QualityFailure, UnboundedValue, ValidationError)
from .model import (DiffusionSpec, EsoReward, PutReward, default_domain, make_preset,
                    validate_assumptions)
from .fundamentals import (FundamentalPair, Numerics, check_convexity, decompose_solution,
                           hitting_laplace, scale_function, solve_fundamental_pair)
from .transform import INF, TransformedGeometry, build_geometry, limit_at_infinity
from .eso import (EsoSolution, classify_case, evaluate_value, smooth_fit_report, solve_eso,
                  solve_one_sided, solve_two_sided)
from .barrier import (BarrierPutSolution, solve_barrier_put, solve_perpetual_put, solve_put,
                      solve_z0)
from .montecarlo import (McEstimate, PathConfig, brute_force_thresholds,
                         estimate_hitting_laplace, evaluate_threshold_strategy)
from .sweep import SweepBase, SweepReport, run_sweep

__all__ = [
    "ConfigError", "DomainError", "NumericalFailure", "OptStopError", "PreconditionError",
    "QualityFailure", "UnboundedValue", "ValidationError",
    "DiffusionSpec", "EsoReward", "PutReward", "default_domain", "make_preset",
    "validate_assumptions",
    "FundamentalPair", "Numerics", "check_convexity", "decompose_solution", "hitting_laplace",
    "scale_function", "solve_fundamental_pair",
    "INF", "TransformedGeometry", "build_geometry", "limit_at_infinity",
    "EsoSolution", "classify_case", "evaluate_value", "smooth_fit_report", "solve_eso",
    "solve_one_sided", "solve_two_sided",
    "BarrierPutSolution", "solve_barrier_put", "solve_perpetual_put", "solve_put", "solve_z0",
    "McEstimate", "PathConfig", "brute_force_thresholds", "estimate_hitting_laplace",
    "evaluate_threshold_strategy",
    "SweepBase", "SweepReport", "run_sweep",
]

__version__ = "0.1.0"
