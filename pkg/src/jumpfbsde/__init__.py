"""Fully coupled forward-backward SDEs with Poisson jumps and spike-variation checks."""

from .adjoint import (FirstOrderAdjoint, KAlgebraSingularity, SecondOrderAdjoint, k_algebra,
                      k_algebra_residual, solve_first_order_adjoint, solve_second_order_adjoint)
from .fbsolve import (ContractionError, FBSDEPSolution, NotConvergedError, evaluate_cost,
                      picard_solve, simulate_forward, solve_backward)
from .markspace import MarkSpace, MarkVector, integrate, l2_norm
from .maxprinciple import (SpikeConfig, build_spike_control, expansion_check,
                           first_variation_simulate, order_experiment, script_hamiltonian,
                           spike_cost_gap, verify_mp)
from .model import Problem, builtin_problem, list_problems, validate_problem
from .noise import NoiseBundle, TimeGrid, generate_noise
from .regression import RegressionConfig

__version__ = "0.1.0"

__all__ = [
    "FirstOrderAdjoint", "KAlgebraSingularity", "SecondOrderAdjoint", "k_algebra",
    "k_algebra_residual", "solve_first_order_adjoint", "solve_second_order_adjoint",
    "ContractionError", "FBSDEPSolution", "NotConvergedError", "evaluate_cost", "picard_solve",
    "simulate_forward", "solve_backward", "MarkSpace", "MarkVector", "integrate", "l2_norm",
    "SpikeConfig", "build_spike_control", "expansion_check", "first_variation_simulate",
    "order_experiment", "script_hamiltonian", "spike_cost_gap", "verify_mp", "Problem",
    "builtin_problem", "list_problems", "validate_problem", "NoiseBundle", "TimeGrid",
    "generate_noise", "RegressionConfig",
]
