"""Mean-field stochastic LQ control with jumps.

Pipeline: Riccati equation -> offset equation -> feedback law ->
multipliers (lam, gam) -> optimal mean-field pair (a*, b*), plus a
verification harness.
"""
from .errors import MFSLQError
from .meanfield import MfslqSolution, solve_mfslq
from .model import Coefficient, CoefficientSet, JumpModel, ProblemSpec, TimeGrid, validate_problem
from .problemfile import parse_problem, read_problem, shipped_problem
from .riccati import assemble_gains, solve_riccati_deterministic
from .simulate import DEFAULT_SEED, ControlPath, FeedbackLaw, NoiseBundle, monte_carlo, simulate_state

__version__ = "0.1.0"

__all__ = [
    "Coefficient", "CoefficientSet", "ControlPath", "DEFAULT_SEED", "FeedbackLaw", "JumpModel", "MFSLQError",
    "MfslqSolution", "NoiseBundle", "ProblemSpec", "TimeGrid", "assemble_gains", "monte_carlo", "parse_problem",
    "read_problem", "shipped_problem", "simulate_state", "solve_mfslq", "solve_riccati_deterministic",
    "validate_problem",
]
