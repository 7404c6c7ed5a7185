"""Joint dense/MoE scaling law: loss prediction, robust fitting and model planning."""

from ._backend import BACKEND
from .accounting import ModelShape, active_params, total_params
from .dataio import RunRecord, bundled_experiment_grid, parse_runs, synthesize
from .fitting import FitConfig, FitReport, fit, fit_separate_chinchilla
from .law import (
    ChinchillaCoefficients,
    LrRule,
    ScalingCoefficients,
    default_coefficients,
    e_hat,
    loss,
    peak_learning_rate,
    reduce_to_chinchilla,
)
from .planner import (
    BudgetSpec,
    PlanResult,
    compute_optimal,
    flops_savings,
    inference_optimal,
    memory_optimal,
    optimal_experts,
)

__version__ = "0.1.0"
