"""Observed-entry multisets and error metrics."""

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .linalg import as_matrix

__all__ = ["ObservationSet", "mse", "rmse_on"]


@dataclass(frozen=True)
class ObservationSet:
    """Multiset of observed ``(row, col, value)`` triples of an n x m matrix.

    The same cell may appear more than once (sampling with replacement).
    """

    n: int
    m: int
    rows: np.ndarray
    cols: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.int64).ravel()
        cols = np.asarray(self.cols, dtype=np.int64).ravel()
        values = np.asarray(self.values, dtype=np.float64).ravel()
        if self.n < 1 or self.m < 1:
            raise ValidationError(f"matrix dimensions must be positive, got {self.n}x{self.m}")
        if not rows.size == cols.size == values.size:
            raise ValidationError("rows, cols and values must have the same length")
        if rows.size and (rows.min() < 0 or rows.max() >= self.n):
            raise ValidationError(f"row index out of range for {self.n} rows")
        if cols.size and (cols.min() < 0 or cols.max() >= self.m):
            raise ValidationError(f"column index out of range for {self.m} columns")
        if not np.all(np.isfinite(values)):
            raise ValidationError("observed values must be finite")
        object.__setattr__(self, "n", int(self.n))
        object.__setattr__(self, "m", int(self.m))
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "cols", cols)
        object.__setattr__(self, "values", values)

    @classmethod
    def from_entries(cls, entries, n, m):
        entries = list(entries)
        if not entries:
            return cls(n, m, np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0))
        r, c, v = zip(*entries)
        return cls(n, m, np.array(r), np.array(c), np.array(v, dtype=np.float64))

    @classmethod
    def from_mask(cls, matrix, mask):
        """Observe ``matrix`` on the cells where ``mask`` is true (row-major order)."""
        matrix = np.asarray(matrix, dtype=np.float64)
        r, c = np.nonzero(mask)
        return cls(matrix.shape[0], matrix.shape[1], r, c, matrix[r, c])

    def __len__(self):
        return int(self.values.size)

    @property
    def shape(self):
        return self.n, self.m

    def entries(self):
        return list(zip(self.rows.tolist(), self.cols.tolist(), self.values.tolist()))

    def subset(self, index) -> "ObservationSet":
        index = np.asarray(index)
        return ObservationSet(self.n, self.m, self.rows[index], self.cols[index], self.values[index])

    def require_nonempty(self):
        if len(self) == 0:
            raise ValidationError("observation set is empty")
        return self

    def scatter_sum(self, per_entry=None) -> np.ndarray:
        """Dense n x m matrix with ``per_entry`` (default: values) summed per cell."""
        out = np.zeros((self.n, self.m))
        np.add.at(out, (self.rows, self.cols), self.values if per_entry is None else per_entry)
        return out

    def at(self, matrix) -> np.ndarray:
        """Entries of ``matrix`` at the observed cells, one per observation."""
        return np.asarray(matrix)[self.rows, self.cols]


def mse(m_hat, m_star) -> float:
    """Mean squared error over all cells."""
    a = as_matrix(m_hat, "m_hat")
    b = as_matrix(m_star, "m_star")
    if a.shape != b.shape:
        raise ValidationError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def rmse_on(obs: ObservationSet, m_hat) -> float:
    """RMSE of ``m_hat`` against the observed values, averaged over the multiset."""
    a = as_matrix(m_hat, "m_hat")
    if a.shape != obs.shape:
        raise ValidationError(f"shape mismatch: {a.shape} vs {obs.shape}")
    obs.require_nonempty()
    return float(np.sqrt(np.mean((obs.at(a) - obs.values) ** 2)))
