"""Lipschitz pool-adjacent-violators (LPAV) regression.

Fits the least-squares nondecreasing, L-Lipschitz sequence to scalar data

    min_y  sum_i (y_i - x_i)^2
    s.t.   0 <= y_{i+1} - y_i <= L (z_{i+1} - z_i)

by ADMM on the slack-variable form ``Mbar @ ybar = bbar, slack >= 0``.  The
y-update is an equality-constrained QP solved through a sparse KKT system
that is factored once per problem; the z-update is a clamp and the u-update
is scaled dual ascent.  The fitted values are turned into a piecewise linear
:class:`MonotoneFn` that is extended to the real line by clamping.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ConvergenceError, NumericalError, ValidationError

__all__ = [
    "LpavProblem",
    "LpavSolution",
    "AdmmWorkspace",
    "MonotoneFn",
    "build_workspace",
    "admm_y_update",
    "admm_z_update",
    "admm_u_update",
    "lpav_solve",
    "fit_monotone_fn",
]

FEAS_TOL = 1e-6


def _vector(a, name):
    arr = np.atleast_1d(np.asarray(a, dtype=np.float64))
    if arr.ndim != 1:
        raise ValidationError(f"{name} must be one-dimensional")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains NaN or Inf")
    return arr


@dataclass(frozen=True)
class LpavProblem:
    """Sorted covariates ``z``, targets ``x`` and Lipschitz bound ``lipschitz``."""

    z: np.ndarray
    x: np.ndarray
    lipschitz: float

    def __post_init__(self):
        z = _vector(self.z, "z")
        x = _vector(self.x, "x")
        if z.size == 0:
            raise ValidationError("LPAV needs at least one point")
        if z.shape != x.shape:
            raise ValidationError(f"z and x lengths differ ({z.size} vs {x.size})")
        if np.any(np.diff(z) < 0):
            raise ValidationError("z must be sorted nondecreasing")
        if not np.isfinite(self.lipschitz) or self.lipschitz < 0:
            raise ValidationError(f"lipschitz must be finite and >= 0, got {self.lipschitz}")
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "lipschitz", float(self.lipschitz))

    @classmethod
    def from_unsorted(cls, z, x, lipschitz):
        """Sort ``(z, x)`` pairs by ``z`` (stable) and build a problem.

        Returns the problem and the permutation used, so fitted values can be
        mapped back with ``y_orig[order] = solution.y``.
        """
        z = _vector(z, "z")
        x = _vector(x, "x")
        if z.shape != x.shape:
            raise ValidationError(f"z and x lengths differ ({z.size} vs {x.size})")
        order = np.argsort(z, kind="stable")
        return cls(z[order], x[order], lipschitz), order

    @property
    def size(self) -> int:
        return self.z.size


@dataclass
class LpavSolution:
    y: np.ndarray
    objective: float
    iterations: int
    primal_residual: float
    dual_residual: float
    polished: bool = False
    # (ybar, z, u) of the ADMM run on the tie-collapsed problem, for warm starts
    state: Optional[tuple] = field(default=None, repr=False)


def _collapse_ties(z, x):
    """Merge equal covariates; returns (z_unique, x_mean, counts, inverse)."""
    zu, inverse, counts = np.unique(z, return_inverse=True, return_counts=True)
    sums = np.bincount(inverse, weights=x, minlength=zu.size)
    return zu, sums / counts, counts.astype(np.float64), inverse


def constraint_matrices(f: int):
    """Return ``(M1, M2)`` as sparse (f-1) x f difference operators.

    ``M1 @ y = y_i - y_{i+1}`` and ``M2 @ y = y_{i+1} - y_i``.
    """
    if f < 2:
        empty = sp.csr_matrix((0, f))
        return empty, empty
    rows = np.arange(f - 1)
    m1 = sp.csr_matrix(
        (np.r_[np.ones(f - 1), -np.ones(f - 1)], (np.r_[rows, rows], np.r_[rows, rows + 1])),
        shape=(f - 1, f),
    )
    return m1, -m1


@dataclass
class AdmmWorkspace:
    """Mutable ADMM state for one LPAV problem (single owner, not shared).

    Vectors ``y_bar``, ``z_slack`` and ``u_dual`` have length ``3f - 2``: the
    first ``f`` entries are the fitted values, the remaining ``2f - 2`` the
    slacks of ``M1 y <= 0`` and ``M2 y <= b``.
    """

    f: int
    weights: np.ndarray
    m_stack: sp.csr_matrix
    b_bar: np.ndarray
    m_bar: sp.csr_matrix
    gamma: float
    kkt: sp.csc_matrix
    kkt_factor: object
    y_bar: np.ndarray
    z_slack: np.ndarray
    u_dual: np.ndarray

    @property
    def n_vars(self) -> int:
        return 3 * self.f - 2


def build_workspace(z, lipschitz: float, gamma: float = 1.0, weights=None) -> AdmmWorkspace:
    """Assemble and factor the KKT matrix for sorted, strictly increasing ``z``.

    The matrix depends only on the covariate spacing, the weights and
    ``gamma``, so the factorization is reused across all ADMM iterations.
    """
    z = _vector(z, "z")
    if gamma <= 0:
        raise ValidationError(f"gamma must be positive, got {gamma}")
    f = z.size
    w = np.ones(f) if weights is None else _vector(weights, "weights")
    n_var = 3 * f - 2
    n_con = 2 * f - 2

    m1, m2 = constraint_matrices(f)
    m_stack = sp.vstack([m1, m2], format="csr") if f > 1 else sp.csr_matrix((0, f))
    b = lipschitz * np.diff(z)
    b_bar = np.r_[np.zeros(f - 1), b]
    m_bar = sp.hstack([m_stack, sp.identity(n_con, format="csr")], format="csr")

    p_diag = np.r_[2.0 * w, np.zeros(n_con)]
    top_left = sp.diags(p_diag + gamma)
    kkt = sp.bmat([[top_left, m_bar.T], [m_bar, None]], format="csc") if n_con else sp.csc_matrix(top_left)
    try:
        factor = spla.splu(kkt)
    except RuntimeError as exc:  # "Factor is exactly singular"
        raise NumericalError(f"LPAV KKT matrix is singular (f={f}, gamma={gamma})") from exc

    zeros = np.zeros(n_var)
    return AdmmWorkspace(
        f=f, weights=w, m_stack=m_stack, b_bar=b_bar, m_bar=m_bar, gamma=float(gamma),
        kkt=kkt, kkt_factor=factor, y_bar=zeros.copy(), z_slack=zeros.copy(), u_dual=zeros.copy(),
    )


def admm_y_update(ws: AdmmWorkspace, x) -> np.ndarray:
    """Equality-constrained QP step: solve the KKT system for ``(ybar, nu)``."""
    x = _vector(x, "x")
    n_var = ws.n_vars
    q = np.r_[-2.0 * ws.weights * x, np.zeros(n_var - ws.f)]
    rhs = np.r_[-(q + ws.gamma * (ws.u_dual - ws.z_slack)), ws.b_bar]
    sol = ws.kkt_factor.solve(rhs)
    if not np.all(np.isfinite(sol)):
        raise NumericalError("KKT solve produced non-finite values")
    ws.y_bar = sol[:n_var]
    return ws.y_bar


def admm_z_update(ws: AdmmWorkspace) -> np.ndarray:
    v = ws.y_bar + ws.u_dual
    v[ws.f:] = np.maximum(v[ws.f:], 0.0)
    ws.z_slack = v
    return ws.z_slack


def admm_u_update(ws: AdmmWorkspace) -> np.ndarray:
    ws.u_dual = ws.u_dual + ws.y_bar - ws.z_slack
    return ws.u_dual


def _solve_pattern(x, w, b, pattern):
    """Exact minimizer with links fixed by ``pattern``.

    ``pattern[i]`` is 0 (link i free), 1 (y_{i+1} = y_i) or 2
    (y_{i+1} = y_i + b_i).  Returns the fitted values and the link
    multipliers ``nu`` (positive means the lower bound pushes).
    """
    f = x.size
    step = np.where(pattern == 2, b, 0.0)
    group = np.r_[0, np.cumsum(pattern == 0)]
    offset = np.r_[0.0, np.cumsum(step)]
    # offsets relative to the group start
    start_off = offset[np.r_[0, np.flatnonzero(pattern == 0) + 1]]
    offset = offset - start_off[group]
    ng = group[-1] + 1
    wsum = np.bincount(group, weights=w, minlength=ng)
    level = np.bincount(group, weights=w * (x - offset), minlength=ng) / wsum
    y = level[group] + offset
    nu = -2.0 * np.cumsum(w * (y - x))[: f - 1]
    return y, nu


def _kkt_ok(y, nu, x, b, pattern):
    d = np.diff(y)
    scale = 1.0 + np.max(np.abs(x))
    feas_tol = 1e-10 * scale
    # multipliers are running sums over up to f residuals
    mult_tol = 1e-9 * scale * max(1, x.size)
    if np.any(d < -feas_tol) or np.any(d > b + feas_tol):
        return False
    equality = b <= feas_tol  # lower and upper bounds coincide
    if np.any(nu[(pattern == 1) & ~equality] < -mult_tol):
        return False
    if np.any(nu[(pattern == 2) & ~equality] > mult_tol):
        return False
    return True


def _active_set_refine(x, w, b, pattern, max_steps):
    """Primal-dual active-set iterations from an initial link pattern.

    Free links that violate a bound are fixed at it; fixed links whose
    multiplier has the wrong sign are released.  Returns the certified
    solution or None if the pattern does not settle within ``max_steps``.
    """
    pattern = np.where((pattern == 2) & (b == 0.0), 1, pattern)
    tol = 1e-9 * (1.0 + np.max(np.abs(x))) * max(1, x.size)
    seen = set()
    for _ in range(max_steps):
        y, nu = _solve_pattern(x, w, b, pattern)
        if _kkt_ok(y, nu, x, b, pattern):
            return y
        d = np.diff(y)
        new = pattern.copy()
        free = pattern == 0
        new[free & (d < -tol)] = 1
        new[free & (d > b + tol)] = 2
        equality = b <= tol
        new[(pattern == 1) & ~equality & (nu < -tol)] = 0
        new[(pattern == 2) & ~equality & (nu > tol)] = 0
        key = new.tobytes()
        if key in seen:  # cycling
            return None
        seen.add(key)
        pattern = new
    return None


def _primal_active_set(x, w, b, y, max_steps):
    """Classical primal active-set method started at a feasible ``y``.

    Each step either moves towards the minimizer of the current working set
    until a free link hits a bound (which joins the working set) or, at a
    working-set minimizer, releases the link with the most wrong-signed
    multiplier.  Finite for this strictly convex problem.
    """
    d = np.diff(y)
    tol = 1e-12 * (1.0 + np.max(np.abs(x)))
    pattern = np.where(d <= tol, 1, np.where(d >= b - tol, 2, 0)).astype(np.int64)
    pattern = np.where((pattern == 2) & (b == 0.0), 1, pattern)
    equality = b == 0.0
    y = y.copy()
    for _ in range(max_steps):
        target, nu = _solve_pattern(x, w, b, pattern)
        step = target - y
        if np.max(np.abs(step)) <= 1e-13 * (1.0 + np.max(np.abs(x))):
            wrong = np.where(pattern == 1, -nu, np.where(pattern == 2, nu, -np.inf))
            wrong[equality] = -np.inf
            i = int(np.argmax(wrong))
            if wrong[i] <= 1e-12 * (1.0 + np.max(np.abs(x))) * max(1, x.size):
                return target
            pattern[i] = 0
            continue
        d = np.diff(y)
        dd = np.diff(step)
        free = pattern == 0
        with np.errstate(divide="ignore", invalid="ignore"):
            to_lo = np.where(free & (dd < 0), -d / dd, np.inf)
            to_hi = np.where(free & (dd > 0), (b - d) / dd, np.inf)
        limits = np.minimum(to_lo, to_hi)
        i = int(np.argmin(limits))
        alpha = limits[i]
        if alpha >= 1.0:
            y = target
            continue
        alpha = max(alpha, 0.0)
        y = y + alpha * step
        pattern[i] = 1 if to_lo[i] <= to_hi[i] else 2
        if pattern[i] == 2 and equality[i]:
            pattern[i] = 1
    return None


def _polish(ws: AdmmWorkspace, x, b, max_steps: int = 100):
    """Recover the exact minimizer from an approximate ADMM iterate.

    First a few primal-dual active-set steps from the active set read off the
    slack variables; if those do not settle, a primal active-set method
    started at the clamped (feasible) ADMM iterate.
    """
    f = ws.f
    if f == 1:
        return np.array([x[0]])
    slack = ws.z_slack[f:]
    lo_slack, hi_slack = slack[: f - 1], slack[f - 1:]
    guess = np.where(lo_slack == 0.0, 1, np.where(hi_slack == 0.0, 2, 0))
    y = _active_set_refine(x, ws.weights, b, guess, max_steps)
    if y is None:
        y = _primal_active_set(x, ws.weights, b, _repair(ws.y_bar[:f], b), 20 * f + 100)
    return y


def _repair(y, b):
    out = y.copy()
    for i in range(1, out.size):
        out[i] = out[i - 1] + min(max(out[i] - out[i - 1], 0.0), b[i - 1])
    return out


def lpav_solve(problem: LpavProblem, gamma: float = 1.0, eps_abs: float = 1e-2,
               eps_rel: float = 1e-2, max_iters: int = 5000, *, warm_start=None,
               polish: bool = True, refine_floor: float = 1e-10) -> LpavSolution:
    """Solve an LPAV problem with ADMM.

    Tied covariates are merged first (targets averaged, the merged point
    weighted by its multiplicity), which leaves the optimum unchanged.  ADMM
    stops on the usual primal/dual residual test with absolute and relative
    tolerances ``eps_abs``/``eps_rel``.  With ``polish`` the active set read
    off the ADMM iterate is solved exactly and kept if it passes a KKT check;
    while the check fails, ADMM continues with ten times tighter tolerances
    (down to ``refine_floor``, within the ``max_iters`` budget).  An iterate
    that never certifies is made feasible by a forward clamping pass.

    ``warm_start`` is the ``state`` of an earlier solution; it is used only
    if the merged problem has the same size.

    Raises
    ------
    ConvergenceError
        If the residual test is not met within ``max_iters`` iterations.
    """
    if max_iters < 1:
        raise ValidationError("max_iters must be >= 1")
    zu, xu, counts, inverse = _collapse_ties(problem.z, problem.x)
    f = zu.size
    b = problem.lipschitz * np.diff(zu)
    ws = build_workspace(zu, problem.lipschitz, gamma, weights=counts)
    if warm_start is not None and warm_start[0].size == ws.n_vars:
        ws.y_bar, ws.z_slack, ws.u_dual = (np.array(v, dtype=np.float64) for v in warm_start)

    sqrt_n = np.sqrt(ws.n_vars)
    r_norm = s_norm = np.inf
    k = 0

    def run_until(eps_a, eps_r):
        nonlocal k, r_norm, s_norm
        while k < max_iters:
            k += 1
            z_prev = ws.z_slack
            admm_y_update(ws, xu)
            admm_z_update(ws)
            admm_u_update(ws)
            r_norm = np.linalg.norm(ws.y_bar - ws.z_slack)
            s_norm = ws.gamma * np.linalg.norm(ws.z_slack - z_prev)
            eps_pri = sqrt_n * eps_a + eps_r * max(np.linalg.norm(ws.y_bar), np.linalg.norm(ws.z_slack))
            eps_dual = sqrt_n * eps_a + eps_r * ws.gamma * np.linalg.norm(ws.u_dual)
            if r_norm <= eps_pri and s_norm <= eps_dual:
                return True
        return False

    if not run_until(eps_abs, eps_rel):
        raise ConvergenceError(
            f"LPAV ADMM did not converge in {max_iters} iterations "
            f"(primal {r_norm:.3g}, dual {s_norm:.3g})",
            iterations=k, residuals={"primal": float(r_norm), "dual": float(s_norm)},
        )

    yu = None
    if polish:
        # tighten the tolerance until the active set is identified or the budget runs out
        eps_a, eps_r = eps_abs, eps_rel
        while True:
            yu = _polish(ws, xu, b)
            if yu is not None or eps_a < refine_floor:
                break
            eps_a, eps_r = eps_a / 10.0, eps_r / 10.0
            if not run_until(eps_a, eps_r):
                yu = _polish(ws, xu, b)
                break
    polished = yu is not None
    if yu is None:
        yu = _repair(ws.y_bar[:f], b)
    y = yu[inverse]
    return LpavSolution(
        y=y,
        objective=float(np.sum((y - problem.x) ** 2)),
        iterations=k,
        primal_residual=float(r_norm),
        dual_residual=float(s_norm),
        polished=polished,
        state=(ws.y_bar.copy(), ws.z_slack.copy(), ws.u_dual.copy()),
    )


@dataclass(frozen=True)
class MonotoneFn:
    """Nondecreasing, L-Lipschitz piecewise linear function, flat outside its knots."""

    knots_z: np.ndarray
    knots_y: np.ndarray
    lipschitz: float

    def __post_init__(self):
        kz = _vector(self.knots_z, "knots_z")
        ky = _vector(self.knots_y, "knots_y")
        if kz.size == 0 or kz.shape != ky.shape:
            raise ValidationError("knots must be non-empty and of equal length")
        if np.any(np.diff(kz) <= 0):
            raise ValidationError("knots_z must be strictly increasing")
        dy = np.diff(ky)
        if np.any(dy < -FEAS_TOL) or np.any(dy > self.lipschitz * np.diff(kz) + FEAS_TOL):
            raise ValidationError("knot values violate the monotone/Lipschitz constraints")
        object.__setattr__(self, "knots_z", kz)
        object.__setattr__(self, "knots_y", ky)
        object.__setattr__(self, "lipschitz", float(self.lipschitz))

    def __call__(self, zeta):
        return self.evaluate(zeta)

    def evaluate(self, zeta):
        """Linear interpolation between knots, clamped to the end values."""
        out = np.interp(zeta, self.knots_z, self.knots_y)
        return float(out) if np.ndim(out) == 0 else out

    @property
    def slopes(self) -> np.ndarray:
        # clipped because rounding in y can overshoot L on nearly tied knots
        return np.clip(np.diff(self.knots_y) / np.diff(self.knots_z), 0.0, self.lipschitz)

    def subgradient(self, zeta):
        """A subgradient of the function at ``zeta``.

        Segment slope inside a segment, 0 outside the knot range, and the
        mean of the two neighbouring slopes at a knot (the outside slope
        counting as 0 at the end knots).
        """
        zeta_arr = np.asarray(zeta, dtype=np.float64)
        padded = np.r_[0.0, self.slopes, 0.0]  # slope of piece left of knot k is padded[k]
        idx = np.searchsorted(self.knots_z, zeta_arr, side="right")
        out = padded[idx]
        at_knot = np.isin(zeta_arr, self.knots_z)
        if np.any(at_knot):
            k = np.searchsorted(self.knots_z, zeta_arr[at_knot])
            out = np.array(out, dtype=np.float64)
            out[at_knot] = 0.5 * (padded[k] + padded[k + 1])
        return float(out) if np.ndim(out) == 0 else out

    @property
    def value_range(self):
        return float(self.knots_y[0]), float(self.knots_y[-1])


def evaluate(fn: MonotoneFn, zeta):
    return fn.evaluate(zeta)


def subgradient(fn: MonotoneFn, zeta):
    return fn.subgradient(zeta)


def fit_monotone_fn(z, y_fitted, lipschitz: float) -> MonotoneFn:
    """Build a :class:`MonotoneFn` through the points ``(z, y_fitted)``.

    Points sharing a covariate are merged to their mean value, and slopes are
    then pushed into ``[0, lipschitz]`` by one forward pass so the result
    satisfies its invariants exactly.
    """
    z = _vector(z, "z")
    y = _vector(y_fitted, "y_fitted")
    if z.size == 0:
        raise ValidationError("cannot fit a function to zero points")
    if z.shape != y.shape:
        raise ValidationError("z and y_fitted lengths differ")
    zu, yu, _, _ = _collapse_ties(z, y)
    yu = _repair(yu, lipschitz * np.diff(zu))
    return MonotoneFn(zu, yu, lipschitz)
