"""Dense linear algebra helpers: SVD, rank-r projection, norms, effective rank.

Matrices are plain 2-d float64 numpy arrays throughout the package.
"""

from typing import NamedTuple, Optional

import numpy as np

from .errors import ConvergenceError, ValidationError

__all__ = [
    "SvdFactors",
    "as_matrix",
    "svd",
    "project_rank",
    "effective_rank",
    "spectral_norm",
    "frobenius_norm",
]


class SvdFactors(NamedTuple):
    """Top-k singular triplets, ``a ~= u @ diag(s) @ v.T``."""

    u: np.ndarray
    s: np.ndarray
    v: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.s) @ self.v.T


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Return ``a`` as a finite 2-d float64 array or raise ValidationError."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValidationError(f"{name} must be a non-empty 2-d array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains NaN or Inf entries")
    return arr


def _fix_signs(u: np.ndarray, v: np.ndarray) -> None:
    # first nonzero entry of every u column made nonnegative, v flipped to match
    for j in range(u.shape[1]):
        col = u[:, j]
        nz = np.flatnonzero(np.abs(col) > 1e-14)
        if nz.size and col[nz[0]] < 0:
            u[:, j] = -col
            v[:, j] = -v[:, j]


def _randomized_svd(a, k, oversample, n_iter, seed):
    rng = np.random.default_rng(seed)
    n, m = a.shape
    width = min(k + oversample, n, m)
    q, _ = np.linalg.qr(a @ rng.standard_normal((m, width)))
    for _ in range(n_iter):
        q, _ = np.linalg.qr(a.T @ q)
        q, _ = np.linalg.qr(a @ q)
    ub, s, vt = np.linalg.svd(q.T @ a, full_matrices=False)
    return q @ ub[:, :k], s[:k], vt[:k].T


def svd(a, k: Optional[int] = None, method: str = "full", *, oversample: int = 10,
        n_iter: int = 4, seed: int = 0) -> SvdFactors:
    """Top-``k`` singular value decomposition of ``a``.

    Parameters
    ----------
    a : array_like, shape (n, m)
    k : int, optional
        Number of triplets to keep; defaults to ``min(n, m)``.
    method : {"full", "randomized"}
        ``"full"`` runs LAPACK's divide-and-conquer SVD and truncates.
        ``"randomized"`` uses a subspace iteration sketch, worthwhile only
        when ``k`` is much smaller than ``min(n, m)``.

    Singular vectors follow a fixed sign convention: the first nonzero entry
    of every left singular vector is nonnegative.
    """
    a = as_matrix(a)
    kmax = min(a.shape)
    if k is None:
        k = kmax
    if not 1 <= k <= kmax:
        raise ValidationError(f"k must lie in [1, {kmax}], got {k}")

    if method == "full":
        try:
            u, s, vt = np.linalg.svd(a, full_matrices=False)
        except np.linalg.LinAlgError as exc:  # LAPACK gesdd did not converge
            raise ConvergenceError(f"SVD did not converge: {exc}") from exc
        u, s, v = u[:, :k].copy(), s[:k].copy(), vt[:k].T.copy()
    elif method == "randomized":
        u, s, v = _randomized_svd(a, k, oversample, n_iter, seed)
    else:
        raise ValidationError(f"unknown SVD method {method!r}")

    _fix_signs(u, v)
    return SvdFactors(u, s, v)


def project_rank(a, r: int) -> np.ndarray:
    """Best rank-``r`` approximation of ``a`` in Frobenius norm."""
    a = as_matrix(a)
    if not 1 <= r <= min(a.shape):
        raise ValidationError(f"rank must lie in [1, {min(a.shape)}], got {r}")
    return svd(a, r).reconstruct()


def singular_values(a) -> np.ndarray:
    return np.linalg.svd(as_matrix(a), compute_uv=False)


def effective_rank(a, eps: float) -> int:
    """Smallest k whose rank-k truncation has relative Frobenius error <= eps."""
    if not 0.0 < eps < 1.0:
        raise ValidationError(f"eps must lie in (0, 1), got {eps}")
    s2 = singular_values(a) ** 2
    total = s2.sum()
    if total == 0.0:
        raise ValidationError("effective rank is undefined for the zero matrix")
    # tail sums computed from the small end to avoid cancellation
    tail = np.cumsum(s2[::-1])[::-1]  # tail[k] = sum_{j>=k} sigma_j^2 (0-based)
    tail = np.append(tail[1:], 0.0)  # now tail[k-1] = sum_{j>k} sigma_j^2
    ratio = np.sqrt(tail / total)
    return int(np.argmax(ratio <= eps)) + 1


def spectral_norm(a) -> float:
    return float(singular_values(a)[0])


def frobenius_norm(a) -> float:
    return float(np.sqrt(np.sum(as_matrix(a) ** 2)))
