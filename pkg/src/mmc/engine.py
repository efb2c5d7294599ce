"""Monotonic matrix completion solvers.

All solvers alternate a gradient step on the observed cells of the latent
low-rank matrix Z, a projection onto rank-r matrices, and an LPAV fit of the
monotone link g from (Z on observed cells) to the observed values:

* :func:`mmc_calibrated` (MMC-c) steps along the gradient of the calibrated
  loss ``sum Phi(Z) - X Z`` with ``Phi' = g``, i.e. ``g(Z) - X``;
* :func:`mmc_least_squares` (MMC-LS) steps along ``(g(Z) - X) g'(Z)``;
* :func:`mmc_one_step` (MMC-1) is the single projection estimator;
* :func:`run_rank_schedule` grows the working rank when progress stalls;
* :func:`lrmc_baseline` is a plain rank-r projected gradient completer with
  the identity link, used only as a comparison point.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence

import numpy as np

from .errors import ConvergenceError, DivergenceError, ValidationError
from .linalg import project_rank
from .lpav import LpavProblem, MonotoneFn, fit_monotone_fn, lpav_solve
from .observations import ObservationSet, rmse_on

__all__ = [
    "RankSchedule",
    "MmcConfig",
    "IterationRecord",
    "MmcResult",
    "init_z",
    "init_g",
    "calibrated_gradient",
    "least_squares_gradient",
    "fit_link",
    "mmc_calibrated",
    "mmc_least_squares",
    "mmc_one_step",
    "run_rank_schedule",
    "lrmc_baseline",
    "select_rank",
    "synthetic_protocol_config",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RankSchedule:
    """Increasing-rank heuristic: start at ``r_min``, add ``r_inc`` whenever
    the relative decrease of the training residual is at most ``progress_eps``,
    never exceeding ``r_max``."""

    r_min: int = 1
    r_inc: int = 1
    r_max: int = 10
    progress_eps: float = 1e-2

    def validate(self, n: int, m: int):
        if not 1 <= self.r_min <= self.r_max <= min(n, m):
            raise ValidationError(
                f"need 1 <= r_min <= r_max <= {min(n, m)}, got r_min={self.r_min}, r_max={self.r_max}")
        if self.r_inc < 1:
            raise ValidationError("r_inc must be >= 1")
        if self.progress_eps < 0:
            raise ValidationError("progress_eps must be >= 0")


@dataclass(frozen=True)
class MmcConfig:
    """Solver hyperparameters.

    ``eta=None`` means ``mn/|Omega|``.  ``rank_schedule`` (if given) takes
    precedence over the fixed ``rank`` in :func:`run_rank_schedule`.
    """

    eta: Optional[float] = None
    t_max: int = 50
    rank: int = 5
    rank_schedule: Optional[RankSchedule] = None
    lipschitz: float = 1.0
    train_residual_threshold: float = 1e-3
    gamma: float = 1.0
    eps_abs: float = 1e-2
    eps_rel: float = 1e-2
    lpav_max_iters: int = 5000
    max_step_halvings: int = 10
    divergence_threshold: float = 1e6
    seed: int = 0

    def validate(self, n: int, m: int):
        if self.eta is not None and not self.eta > 0:
            raise ValidationError(f"eta must be positive, got {self.eta}")
        if self.t_max < 1:
            raise ValidationError("t_max must be >= 1")
        if not 1 <= self.rank <= min(n, m):
            raise ValidationError(f"rank must lie in [1, {min(n, m)}], got {self.rank}")
        if self.lipschitz < 0:
            raise ValidationError("lipschitz must be >= 0")
        if self.train_residual_threshold <= 0 or self.gamma <= 0:
            raise ValidationError("thresholds and gamma must be positive")
        if self.rank_schedule is not None:
            self.rank_schedule.validate(n, m)

    @property
    def lpav_kwargs(self):
        return dict(gamma=self.gamma, eps_abs=self.eps_abs, eps_rel=self.eps_rel,
                    max_iters=self.lpav_max_iters)


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    train_rmse: float
    relative_residual: float
    rank: int
    lpav_iterations: int


@dataclass
class MmcResult:
    m_hat: np.ndarray
    z_hat: np.ndarray
    g_hat: MonotoneFn
    trace: List[IterationRecord] = field(default_factory=list)
    rank: int = 0
    eta: float = float("nan")
    stopped_early: bool = False

    @property
    def iterations(self) -> int:
        return len(self.trace)


def init_z(obs: ObservationSet) -> np.ndarray:
    """``(mn/|Omega|) * X_Omega``; repeated observations of a cell add up."""
    obs.require_nonempty()
    return (obs.n * obs.m / len(obs)) * obs.scatter_sum()


def init_g(obs: ObservationSet, lipschitz: float = 1.0, span=None) -> MonotoneFn:
    """Linear link ``z -> (|Omega|/mn) z`` on ``span`` (default: range of init_z and 0)."""
    obs.require_nonempty()
    slope = len(obs) / (obs.n * obs.m)
    if span is None:
        z0 = init_z(obs)
        span = (min(0.0, float(z0.min())), max(0.0, float(z0.max())))
    lo, hi = span
    if not hi > lo:
        lo, hi = lo - 1.0, hi + 1.0
    return MonotoneFn(np.array([lo, hi]), slope * np.array([lo, hi]), max(lipschitz, slope))


def calibrated_gradient(z, obs: ObservationSet, g: MonotoneFn) -> np.ndarray:
    """Gradient of ``sum_Omega Phi(Z_ij) - X_ij Z_ij`` with ``Phi' = g``."""
    return obs.scatter_sum(g(obs.at(z)) - obs.values)


def least_squares_gradient(z, obs: ObservationSet, g: MonotoneFn) -> np.ndarray:
    """Squared-loss direction ``(g(Z) - X) g'(Z)`` on observed cells."""
    zo = obs.at(z)
    return obs.scatter_sum((g(zo) - obs.values) * g.subgradient(zo))


def fit_link(z, obs: ObservationSet, lipschitz: float, warm_start=None, **lpav_kwargs):
    """LPAV fit of the link on ``(Z_Omega, X_Omega)``; returns ``(g, solution)``."""
    problem, _ = LpavProblem.from_unsorted(obs.at(z), obs.values, lipschitz)
    sol = lpav_solve(problem, warm_start=warm_start, **lpav_kwargs)
    return fit_monotone_fn(problem.z, sol.y, lipschitz), sol


def _residual_norm(g, z, obs):
    return float(np.linalg.norm(g(obs.at(z)) - obs.values))


def _alternate(obs, cfg, direction, eta, schedule=None):
    n, m = obs.shape
    x_norm = float(np.linalg.norm(obs.values))
    z = init_z(obs)
    g = init_g(obs, cfg.lipschitz)
    rank = schedule.r_min if schedule is not None else cfg.rank
    trace = []
    warm = None
    # the initial pair reproduces X on the observed cells exactly, so progress
    # is only measured between solver iterates
    prev_res = None
    stopped = False
    for t in range(1, cfg.t_max + 1):
        z = project_rank(z - eta * direction(z, obs, g), rank)
        if not np.all(np.isfinite(z)):
            raise DivergenceError(f"non-finite iterate at iteration {t}; try a smaller eta", t)
        try:
            g, sol = fit_link(z, obs, cfg.lipschitz, warm_start=warm, **cfg.lpav_kwargs)
        except ConvergenceError as exc:
            raise ConvergenceError(f"LPAV failed at outer iteration {t}: {exc}",
                                   iterations=t, residuals=exc.residuals) from exc
        warm = sol.state
        res = _residual_norm(g, z, obs)
        rmse = res / np.sqrt(len(obs))
        if not np.isfinite(rmse) or rmse > cfg.divergence_threshold:
            raise DivergenceError(f"train RMSE {rmse:.3g} at iteration {t}; try a smaller eta", t, rmse)
        rel = res / x_norm if x_norm > 0 else res
        trace.append(IterationRecord(t, float(rmse), float(rel), rank, sol.iterations))
        if rel < cfg.train_residual_threshold:
            stopped = True
            break
        if schedule is not None and prev_res and 1.0 - res / prev_res <= schedule.progress_eps:
            rank = min(rank + schedule.r_inc, schedule.r_max)
        prev_res = res
    return MmcResult(g(z), z, g, trace, rank, eta, stopped)


def _with_halving(obs, cfg, attempt_fn):
    obs.require_nonempty()
    cfg.validate(*obs.shape)
    eta = cfg.eta if cfg.eta is not None else obs.n * obs.m / len(obs)
    for attempt in range(cfg.max_step_halvings + 1):
        try:
            return attempt_fn(eta)
        except DivergenceError as exc:
            if attempt == cfg.max_step_halvings:
                raise
            log.info("diverged with eta=%g (%s); halving", eta, exc)
            eta /= 2.0


def _run(obs, cfg, direction, schedule=None):
    return _with_halving(obs, cfg, lambda eta: _alternate(obs, cfg, direction, eta, schedule))


def mmc_calibrated(obs: ObservationSet, cfg: MmcConfig = MmcConfig()) -> MmcResult:
    """MMC-c: alternating calibrated-loss gradient steps and LPAV link fits.

    Runs at most ``cfg.t_max`` iterations and stops once the relative
    training residual ``||g(Z)_Omega - X_Omega|| / ||X_Omega||`` drops below
    ``cfg.train_residual_threshold``.  If the training RMSE exceeds
    ``cfg.divergence_threshold`` the run restarts with half the step size,
    up to ``cfg.max_step_halvings`` times.
    """
    return _run(obs, cfg, calibrated_gradient)


def mmc_least_squares(obs: ObservationSet, cfg: MmcConfig = MmcConfig()) -> MmcResult:
    """MMC-LS: like :func:`mmc_calibrated` but steps along ``(g(Z) - X) g'(Z)``."""
    return _run(obs, cfg, least_squares_gradient)


def run_rank_schedule(obs: ObservationSet, cfg: MmcConfig) -> MmcResult:
    """MMC-c with the increasing-rank heuristic of ``cfg.rank_schedule``."""
    if cfg.rank_schedule is None:
        raise ValidationError("run_rank_schedule needs cfg.rank_schedule")
    return _run(obs, cfg, calibrated_gradient, cfg.rank_schedule)


def mmc_one_step(obs: ObservationSet, rank: int, lipschitz: float = 1.0, gamma: float = 1.0,
                 eps_abs: float = 1e-2, eps_rel: float = 1e-2, max_iters: int = 5000) -> MmcResult:
    """MMC-1: ``Z = P_r(mn X_Omega / |Omega|)``, then one LPAV link fit."""
    obs.require_nonempty()
    if not 1 <= rank <= min(obs.shape):
        raise ValidationError(f"rank must lie in [1, {min(obs.shape)}], got {rank}")
    z = project_rank(init_z(obs), rank)
    g, sol = fit_link(z, obs, lipschitz, gamma=gamma, eps_abs=eps_abs, eps_rel=eps_rel,
                      max_iters=max_iters)
    res = _residual_norm(g, z, obs)
    x_norm = float(np.linalg.norm(obs.values))
    rec = IterationRecord(1, res / np.sqrt(len(obs)), res / x_norm if x_norm else res, rank,
                          sol.iterations)
    return MmcResult(g(z), z, g, [rec], rank, float("nan"), False)


def select_rank(train: ObservationSet, val: ObservationSet, ranks: Sequence[int], solver=None):
    """Pick the rank with the smallest validation RMSE (ties go to the smaller rank).

    ``solver(train, rank)`` defaults to :func:`mmc_one_step`.  Returns
    ``(best_rank, best_result, {rank: validation_rmse})``.
    """
    if not ranks:
        raise ValidationError("no candidate ranks given")
    solver = solver or (lambda obs, r: mmc_one_step(obs, r))
    scores = {}
    best = None
    for r in sorted(set(ranks)):
        result = solver(train, r)
        scores[r] = rmse_on(val, result.m_hat)
        if best is None or scores[r] < scores[best[0]]:
            best = (r, result)
    return best[0], best[1], scores


def _identity_on(z):
    lo, hi = float(z.min()), float(z.max())
    if not hi > lo:
        lo, hi = lo - 1.0, hi + 1.0
    return MonotoneFn(np.array([lo, hi]), np.array([lo, hi]), 1.0)


def _baseline(obs, cfg, eta):
    x_norm = float(np.linalg.norm(obs.values))
    z = project_rank(init_z(obs), cfg.rank)
    trace = []
    stopped = False
    for t in range(1, cfg.t_max + 1):
        z = project_rank(z - eta * obs.scatter_sum(obs.at(z) - obs.values), cfg.rank)
        res = float(np.linalg.norm(obs.at(z) - obs.values))
        rmse = res / np.sqrt(len(obs))
        if not np.isfinite(rmse) or rmse > cfg.divergence_threshold:
            raise DivergenceError(f"baseline diverged at iteration {t}", t, rmse)
        rel = res / x_norm if x_norm else res
        trace.append(IterationRecord(t, rmse, rel, cfg.rank, 0))
        if rel < cfg.train_residual_threshold:
            stopped = True
            break
    return MmcResult(z.copy(), z, _identity_on(z), trace, cfg.rank, eta, stopped)


def lrmc_baseline(obs: ObservationSet, cfg: MmcConfig = MmcConfig()) -> MmcResult:
    """Rank-r projected gradient least squares with the identity link.

    Simple stand-in for a low-rank completion baseline:
    ``Z <- P_r(Z - eta P_Omega(Z - X))`` from ``Z = P_r(init_z(obs))``, with
    the same step-halving retry as the MMC solvers.
    """
    return _with_halving(obs, cfg, lambda eta: _baseline(obs, cfg, eta))


def with_overrides(cfg: MmcConfig, **kwargs) -> MmcConfig:
    return replace(cfg, **{k: v for k, v in kwargs.items() if v is not None})


def synthetic_protocol_config(**overrides) -> MmcConfig:
    """Settings used for the logistic-link synthetic experiments.

    A fixed step ``eta=8`` with link Lipschitz bound 0.25 (the steepest slope
    of the ``c=1`` logistic on the unit scale) keeps ``eta * slope`` near 2,
    where training error decreases monotonically, and the rank grows from 8
    in steps of 6 up to 20 whenever an iteration improves the residual by
    less than 20%.
    """
    base = MmcConfig(eta=8.0, lipschitz=0.25, rank_schedule=RankSchedule(8, 6, 20, 0.2))
    return replace(base, **overrides)
