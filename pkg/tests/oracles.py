"""Independent reference solvers used by the tests."""

import itertools

import numpy as np


def _patterns(k):
    return np.array(list(itertools.product((0, 1, 2), repeat=k)), dtype=np.int8).reshape(-1, k)


_PATTERN_CACHE = {}
_trapezoid = getattr(np, "trapezoid", None) or np.trapz


def exhaustive_lpav(z, x, lipschitz):
    """Exact LPAV optimum by enumerating every link pattern.

    Each link between neighbours is free, pinned at slope 0, or pinned at
    slope L.  For a fixed pattern the least-squares fit is a per-block mean
    with known offsets; the optimum is the best feasible candidate because the
    true minimizer solves the equality problem of its own active set.
    Works on sorted ``z`` (ties allowed) and is exponential in ``len(z)``.
    """
    z = np.asarray(z, dtype=float)
    x = np.asarray(x, dtype=float)
    f = z.size
    if f == 1:
        return x.copy(), 0.0
    b = lipschitz * np.diff(z)
    if f - 1 not in _PATTERN_CACHE:
        _PATTERN_CACHE[f - 1] = _patterns(f - 1)
    pats = _PATTERN_CACHE[f - 1]
    k = pats.shape[0]
    c = np.zeros((k, f))
    c[:, 1:] = np.cumsum(np.where(pats == 2, b, 0.0), axis=1)
    group = np.zeros((k, f), dtype=np.int64)
    group[:, 1:] = np.cumsum(pats == 0, axis=1)
    flat = group + (np.arange(k) * f)[:, None]
    resid = x[None, :] - c
    sums = np.bincount(flat.ravel(), weights=resid.ravel(), minlength=k * f)
    counts = np.bincount(flat.ravel(), minlength=k * f)
    means = sums / np.maximum(counts, 1)
    y = c + means[flat]
    d = np.diff(y, axis=1)
    tol = 1e-11 * (1 + np.abs(x).max())
    feasible = np.all((d >= -tol) & (d <= b + tol), axis=1)
    obj = np.where(feasible, np.sum((y - x) ** 2, axis=1), np.inf)
    best = int(np.argmin(obj))
    return y[best], float(obj[best])


def two_point_lpav(z, x, lipschitz):
    """Closed form for two points: clip the target gap into [0, L dz]."""
    gap = np.clip(x[1] - x[0], 0.0, lipschitz * (z[1] - z[0]))
    lo = 0.5 * (x[0] + x[1] - gap)
    return np.array([lo, lo + gap])


def calibrated_objective(z, obs, g, n_quad=3):
    """sum over observed cells of Phi(z) - x z with Phi(t) = int_0^t g, by quadrature.

    The link's knots inside each interval are added as nodes, so the
    trapezoid rule integrates a piecewise linear ``g`` without kink error.
    """
    total = 0.0
    knots = np.asarray(g.knots_z)
    for r, c, v in zip(obs.rows, obs.cols, obs.values):
        t = z[r, c]
        lo, hi = min(0.0, t), max(0.0, t)
        s = np.union1d(np.linspace(lo, hi, n_quad), knots[(knots > lo) & (knots < hi)])
        if t < 0:
            s = s[::-1]
        total += _trapezoid(g(s), s) - v * t
    return total


def truncation_oracle(a, r):
    """Rank-r truncation built from the eigenvectors of A^T A."""
    w, v = np.linalg.eigh(a.T @ a)
    top = v[:, np.argsort(w)[::-1][:r]]
    return a @ top @ top.T
