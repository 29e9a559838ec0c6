"""Sparse non-negative least-squares problem and its projection operators.

The optimization target throughout the package is

    minimize  ||y - phi @ w||^2   over  w >= 0,  ||w||_0 <= k,

where each column of ``phi`` belongs to one data point and ``y`` is the
regression target (for coreset problems, the sum of all columns).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np


def _frozen_array(values, dtype=np.float64) -> np.ndarray:
    out = np.array(values, dtype=dtype)
    out.setflags(write=False)
    return out


def _as_weights(weights) -> np.ndarray:
    """Accept a WeightVector or a plain 1-D array of weights."""
    if isinstance(weights, WeightVector):
        return weights.w
    return np.asarray(weights, dtype=np.float64)


@dataclass(frozen=True, eq=False)
class SparseRegressionProblem:
    """Immutable least-squares data for the k-sparse non-negative fit.

    ``phi`` has shape (s_dim, n): one column per data point, one row per
    posterior sample. ``y`` has length s_dim. Both are stored read-only so
    instances can be shared across threads.
    """

    phi: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        phi = np.asarray(self.phi, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.float64)
        if phi.ndim != 2:
            raise ValueError(f"phi must be 2-D, got shape {phi.shape}")
        if phi.shape[0] < 1 or phi.shape[1] < 1:
            raise ValueError(f"phi must have at least one row and column, got {phi.shape}")
        if y.shape != (phi.shape[0],):
            raise ValueError(f"y has shape {y.shape}, expected ({phi.shape[0]},)")
        if not np.all(np.isfinite(phi)):
            raise ValueError("phi contains non-finite entries")
        if not np.all(np.isfinite(y)):
            raise ValueError("y contains non-finite entries")
        object.__setattr__(self, "phi", _frozen_array(phi))
        object.__setattr__(self, "y", _frozen_array(y))

    @classmethod
    def from_columns(cls, phi) -> "SparseRegressionProblem":
        """Build the coreset problem whose target is the column sum of ``phi``."""
        phi = np.asarray(phi, dtype=np.float64)
        if phi.ndim != 2:
            raise ValueError(f"phi must be 2-D, got shape {phi.shape}")
        return cls(phi, phi.sum(axis=1))

    @property
    def n(self) -> int:
        return self.phi.shape[1]

    @property
    def s_dim(self) -> int:
        return self.phi.shape[0]


@dataclass(frozen=True, eq=False)
class WeightVector:
    """Dense non-negative weights over the n data points.

    ``support`` is the sorted array of indices with nonzero weight; it is
    derived from ``w`` at construction time.
    """

    w: np.ndarray
    support: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        w = np.asarray(self.w, dtype=np.float64)
        if w.ndim != 1:
            raise ValueError(f"weights must be 1-D, got shape {w.shape}")
        if not np.all(np.isfinite(w)):
            raise ValueError("weights contain non-finite entries")
        if np.any(w < 0):
            raise ValueError("weights must be non-negative")
        object.__setattr__(self, "w", _frozen_array(w))
        object.__setattr__(self, "support", _frozen_array(np.flatnonzero(w), dtype=np.int64))

    @classmethod
    def zeros(cls, n: int) -> "WeightVector":
        return cls(np.zeros(n))

    def __len__(self) -> int:
        return self.w.shape[0]

    @property
    def sparsity(self) -> int:
        """Number of nonzero weights."""
        return int(self.support.shape[0])


def _check_length(problem: SparseRegressionProblem, w: np.ndarray) -> None:
    if w.shape != (problem.n,):
        raise ValueError(f"weights have shape {w.shape}, expected ({problem.n},)")


def objective(problem: SparseRegressionProblem, weights) -> float:
    """Squared residual norm ||y - phi @ w||^2."""
    w = _as_weights(weights)
    _check_length(problem, w)
    r = problem.y - problem.phi @ w
    return float(r @ r)


def gradient(problem: SparseRegressionProblem, weights) -> np.ndarray:
    """Gradient -2 phi^T (y - phi @ w) of the squared residual."""
    w = _as_weights(weights)
    _check_length(problem, w)
    return -2.0 * (problem.phi.T @ (problem.y - problem.phi @ w))


def project_topk_nonneg(v, k: int) -> WeightVector:
    """Euclidean projection onto {w : w >= 0, ||w||_0 <= k}.

    Negative entries are zeroed, then the k largest remaining entries are
    kept. Ties break toward the lowest index so the projection is
    deterministic; zero entries are valid candidates but never beat strictly
    positive ones and never enter the support.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"input must be 1-D, got shape {v.shape}")
    n = v.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    clipped = np.where(v > 0, v, 0.0)
    order = np.argsort(-clipped, kind="stable")
    keep = order[:k]
    out = np.zeros(n)
    out[keep] = clipped[keep]
    return WeightVector(out)


def project_topk_excluding(v, k: int, excluded: Iterable[int]) -> np.ndarray:
    """Indices of the k largest-magnitude entries of ``v`` outside ``excluded``.

    Returns a sorted index array; fewer than k indices when fewer candidates
    remain. Ties break toward the lowest index.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"input must be 1-D, got shape {v.shape}")
    n = v.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    mask = np.ones(n, dtype=bool)
    excluded = np.asarray(sorted(set(int(i) for i in excluded)), dtype=np.int64)
    if excluded.size:
        if excluded[0] < 0 or excluded[-1] >= n:
            raise ValueError("excluded indices out of range")
        mask[excluded] = False
    candidates = np.flatnonzero(mask)
    if candidates.size == 0:
        return np.empty(0, dtype=np.int64)
    order = np.argsort(-np.abs(v[candidates]), kind="stable")
    return np.sort(candidates[order[:k]])


def restrict(v, support: Iterable[int]) -> np.ndarray:
    """Zero out every entry of ``v`` whose index is not in ``support``."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"input must be 1-D, got shape {v.shape}")
    idx = np.asarray(list(support), dtype=np.int64)
    out = np.zeros_like(v)
    if idx.size:
        if idx.min() < 0 or idx.max() >= v.shape[0]:
            raise ValueError("support indices out of range")
        out[idx] = v[idx]
    return out
