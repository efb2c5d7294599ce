"""Monotonic matrix completion: recover ``M = g(Z)`` with low-rank ``Z`` and a
monotone Lipschitz link ``g`` from a subset of noisy entries."""

from .engine import (IterationRecord, MmcConfig, MmcResult, RankSchedule, lrmc_baseline,
                     mmc_calibrated, mmc_least_squares, mmc_one_step, run_rank_schedule,
                     select_rank, synthetic_protocol_config)
from .errors import ConvergenceError, DivergenceError, MmcError, NumericalError, ValidationError
from .linalg import effective_rank, project_rank, svd
from .lpav import LpavProblem, LpavSolution, MonotoneFn, lpav_solve
from .observations import ObservationSet, mse, rmse_on

__version__ = "0.1.0"

__all__ = [
    "IterationRecord", "MmcConfig", "MmcResult", "RankSchedule", "lrmc_baseline",
    "mmc_calibrated", "mmc_least_squares", "mmc_one_step", "run_rank_schedule", "select_rank",
    "synthetic_protocol_config", "ConvergenceError", "DivergenceError", "MmcError",
    "NumericalError", "ValidationError", "effective_rank", "project_rank", "svd", "LpavProblem",
    "LpavSolution", "MonotoneFn", "lpav_solve", "ObservationSet", "mse", "rmse_on",
]
