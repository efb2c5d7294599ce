"""Synthetic data, observation sampling, file formats and splits.

File formats
------------
Triplet CSV
    First line ``n,m``; every further non-blank line ``row,col,value``.
    Indices are 0-based unless the file is read with ``one_indexed=True``.
Dense CSV
    One matrix row per line, comma separated, no header.
Metadata sidecar
    ``<file>.meta.json`` holding ``{"n", "m", "indexing", "source"}``.
"""

import csv
import json
import os
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .errors import ValidationError
from .observations import ObservationSet

__all__ = [
    "SyntheticSpec",
    "SplitSpec",
    "SyntheticData",
    "rng_for",
    "logistic",
    "low_rank_gaussian",
    "gen_synthetic",
    "sample_with_replacement",
    "parse_triplets",
    "write_triplets",
    "read_dense",
    "write_dense",
    "write_metadata",
    "read_metadata",
    "split",
]

# fixed sub-stream per purpose so that e.g. changing p does not change Z*
_STREAMS = {"matrix": 0, "noise": 1, "mask": 2, "split": 3}


def rng_for(seed: int, purpose: str) -> np.random.Generator:
    """PCG64 generator for ``(seed, purpose)``; stable across platforms."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), _STREAMS[purpose]])))


def logistic(z, c: float):
    return 0.5 * (1.0 + np.tanh(0.5 * c * np.asarray(z, dtype=np.float64)))


def low_rank_gaussian(n: int, m: int, r: int, rng: np.random.Generator) -> np.ndarray:
    """Product of standard Gaussian n x r and r x m factors."""
    return rng.standard_normal((n, r)) @ rng.standard_normal((r, m))


@dataclass(frozen=True)
class SyntheticSpec:
    n: int = 30
    m: int = 20
    r: int = 5
    c: float = 1.0
    p: float = 0.5
    noise_sd: float = 0.0
    seed: int = 0
    # clip noisy observations into [-1, 1]
    bounded: bool = False

    def validate(self):
        if self.n < 1 or self.m < 1 or not 1 <= self.r <= min(self.n, self.m):
            raise ValidationError(f"invalid dimensions n={self.n}, m={self.m}, r={self.r}")
        if not self.c > 0:
            raise ValidationError("c must be positive")
        if not 0 < self.p <= 1:
            raise ValidationError("p must lie in (0, 1]")
        if self.noise_sd < 0:
            raise ValidationError("noise_sd must be >= 0")


@dataclass
class SyntheticData:
    z_star: np.ndarray
    m_star: np.ndarray
    x: np.ndarray
    train: ObservationSet
    heldout: ObservationSet


def _noisy(m_star, spec, rng):
    x = m_star + (spec.noise_sd * rng.standard_normal(m_star.shape) if spec.noise_sd > 0 else 0.0)
    return np.clip(x, -1.0, 1.0) if spec.bounded else x


def gen_synthetic(spec: SyntheticSpec) -> SyntheticData:
    """Rank-r Gaussian product through a logistic link, Bernoulli(p) mask.

    Held-out entries carry the noiseless ``M*`` values, training entries the
    (possibly noisy) observations ``X``.
    """
    spec.validate()
    z_star = low_rank_gaussian(spec.n, spec.m, spec.r, rng_for(spec.seed, "matrix"))
    m_star = logistic(z_star, spec.c)
    x = _noisy(m_star, spec, rng_for(spec.seed, "noise"))
    mask = rng_for(spec.seed, "mask").random((spec.n, spec.m)) < spec.p
    train = ObservationSet.from_mask(x, mask)
    heldout = ObservationSet.from_mask(m_star, ~mask)
    return SyntheticData(z_star, m_star, x, train, heldout)


def sample_with_replacement(x, k: int, seed: int) -> ObservationSet:
    """``k`` cells drawn uniformly with replacement, observed from ``x``."""
    x = np.asarray(x, dtype=np.float64)
    if k < 1:
        raise ValidationError("need at least one draw")
    n, m = x.shape
    flat = rng_for(seed, "mask").integers(0, n * m, size=k)
    rows, cols = np.divmod(flat, m)
    return ObservationSet(n, m, rows, cols, x[rows, cols])


def parse_triplets(path, one_indexed: bool = False, shape: Optional[Tuple[int, int]] = None) -> ObservationSet:
    """Read a triplet CSV file.

    The first line declares ``n,m`` unless ``shape`` is given, in which case
    a header line is optional.  Raises ValidationError (with the 1-based line
    number) on malformed lines, out-of-range indices, or an empty file.
    """
    offset = 1 if one_indexed else 0
    rows, cols, vals = [], [], []
    n = m = None
    if shape is not None:
        n, m = shape
    first = True
    with open(path, newline="") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            parts = [p.strip() for p in text.split(",")]
            is_first, first = first, False
            try:
                if len(parts) == 2 and is_first:
                    n_decl, m_decl = int(parts[0]), int(parts[1])
                    if shape is None:
                        n, m = n_decl, m_decl
                    continue
                if len(parts) != 3:
                    raise ValueError(f"expected 3 fields, got {len(parts)}")
                r, c, v = int(parts[0]) - offset, int(parts[1]) - offset, float(parts[2])
            except ValueError as exc:
                raise ValidationError(f"{path}:{lineno}: malformed line {text!r} ({exc})") from None
            if n is None:
                raise ValidationError(f"{path}:{lineno}: missing 'n,m' header line")
            if not (0 <= r < n and 0 <= c < m):
                raise ValidationError(f"{path}:{lineno}: index ({r}, {c}) outside {n}x{m}")
            if not np.isfinite(v):
                raise ValidationError(f"{path}:{lineno}: non-finite value")
            rows.append(r)
            cols.append(c)
            vals.append(v)
    if not vals:
        raise ValidationError(f"{path}: no observations")
    return ObservationSet(n, m, np.array(rows), np.array(cols), np.array(vals))


def write_triplets(path, obs: ObservationSet, one_indexed: bool = False):
    offset = 1 if one_indexed else 0
    with open(path, "w", newline="") as fh:
        fh.write(f"{obs.n},{obs.m}\n")
        for r, c, v in zip(obs.rows.tolist(), obs.cols.tolist(), obs.values.tolist()):
            fh.write(f"{r + offset},{c + offset},{v!r}\n")


def read_dense(path) -> np.ndarray:
    rows = []
    with open(path, newline="") as fh:
        for lineno, rec in enumerate(csv.reader(fh), start=1):
            if not rec or all(not f.strip() for f in rec):
                continue
            try:
                rows.append([float(f) for f in rec])
            except ValueError as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise ValidationError(f"{path}: empty matrix file")
    if len({len(r) for r in rows}) != 1:
        raise ValidationError(f"{path}: ragged rows")
    return np.array(rows)


def write_dense(path, a):
    with open(path, "w", newline="") as fh:
        for row in np.asarray(a, dtype=np.float64):
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def write_metadata(path, n, m, indexing="0", source=""):
    with open(path, "w") as fh:
        json.dump({"n": int(n), "m": int(m), "indexing": str(indexing), "source": source}, fh,
                  indent=2, sort_keys=True)
        fh.write("\n")


def read_metadata(path) -> dict:
    with open(path) as fh:
        meta = json.load(fh)
    missing = {"n", "m", "indexing", "source"} - set(meta)
    if missing:
        raise ValidationError(f"{path}: metadata missing keys {sorted(missing)}")
    return meta


def metadata_path(path) -> str:
    return os.fspath(path) + ".meta.json"


@dataclass(frozen=True)
class SplitSpec:
    """Either global fractions or, with ``per_row``, ``(k_train, k_val)`` per row."""

    train_frac: float = 0.2
    val_frac: float = 0.2
    per_row: Optional[Tuple[int, int]] = None
    seed: int = 0

    def validate(self):
        if self.per_row is not None:
            if min(self.per_row) < 1:
                raise ValidationError("per-row counts must be >= 1")
            return
        if not (0 < self.train_frac < 1 and 0 < self.val_frac < 1):
            raise ValidationError("fractions must lie in (0, 1)")
        if self.train_frac + self.val_frac > 1:
            raise ValidationError("train_frac + val_frac must be <= 1")


def split(obs: ObservationSet, spec: SplitSpec):
    """Partition observations into ``(train, val, test)``.

    Fraction mode draws ``floor(train_frac * N)`` training and
    ``floor(val_frac * N)`` validation entries globally.  Per-row mode draws
    exactly ``k_train`` and ``k_val`` entries from every row that has at least
    ``k_train + k_val`` entries; rows with fewer raise ValidationError.  Every
    observation lands in exactly one part.
    """
    spec.validate()
    rng = rng_for(spec.seed, "split")
    idx = np.arange(len(obs))
    if spec.per_row is None:
        perm = rng.permutation(idx)
        n_tr = int(np.floor(spec.train_frac * len(obs) + 1e-9))
        n_va = int(np.floor(spec.val_frac * len(obs) + 1e-9))
        parts = np.sort(perm[:n_tr]), np.sort(perm[n_tr:n_tr + n_va]), np.sort(perm[n_tr + n_va:])
    else:
        k_tr, k_va = spec.per_row
        counts = np.bincount(obs.rows, minlength=obs.n)
        present = np.flatnonzero(counts)
        short = present[counts[present] < k_tr + k_va]
        if short.size:
            raise ValidationError(
                f"rows with fewer than {k_tr + k_va} entries: {short.tolist()[:20]}"
                + (" ..." if short.size > 20 else ""))
        tr, va, te = [], [], []
        order = np.argsort(obs.rows, kind="stable")
        bounds = np.r_[0, np.cumsum(counts)]
        for row in present:
            members = order[bounds[row]:bounds[row + 1]]
            members = rng.permutation(members)
            tr.append(members[:k_tr])
            va.append(members[k_tr:k_tr + k_va])
            te.append(members[k_tr + k_va:])
        parts = tuple(np.sort(np.concatenate(p)) if p else np.zeros(0, np.int64) for p in (tr, va, te))
    return tuple(obs.subset(p) for p in parts)
