"""Dense-matrix primitives: SVD, nuclear norm, approximate rank.

All functions operate on plain 2-D float64 numpy arrays. Inputs are validated
on entry (finite entries, non-empty, two-dimensional) instead of being wrapped
in a dedicated matrix class. The decomposition is LAPACK's, post-processed
with a fixed sign convention so results are deterministic for a given input.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "as_matrix",
    "SvdResult",
    "svd",
    "nuclear_norm",
    "approximate_rank",
    "average_approximate_rank",
]

DEFAULT_RANK_DELTA = 0.01


def as_matrix(values, name: str = "matrix") -> np.ndarray:
    """Coerce ``values`` to a fresh, finite, 2-D float64 array.

    Raises ``ValueError`` for empty input, wrong dimensionality, or any
    NaN/Inf entry. Always copies, so callers may mutate the result freely.
    """
    m = np.array(values, dtype=np.float64, order="C", copy=True)
    if m.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {m.shape}")
    if m.size == 0:
        raise ValueError(f"{name} must be non-empty")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} contains non-finite entries")
    return m


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD ``m = u @ diag(singular_values) @ v.T``.

    ``u`` and ``v`` hold the left/right singular vectors as columns;
    ``singular_values`` is non-negative and sorted non-increasing.
    """

    u: np.ndarray
    singular_values: np.ndarray
    v: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.singular_values) @ self.v.T


def svd(m) -> SvdResult:
    """Singular value decomposition with a deterministic sign convention.

    The first nonzero entry of each left singular vector is made
    non-negative (the matching right vector is flipped along with it), so
    repeated calls on the same input return identical factors.
    """
    m = as_matrix(m)
    u, s, vt = np.linalg.svd(m, full_matrices=False)
    v = np.ascontiguousarray(vt.T)
    u = np.ascontiguousarray(u)
    # First nonzero entry per column of u; all-zero columns stay untouched.
    first_nz = (u != 0.0).argmax(axis=0)
    leading = u[first_nz, np.arange(u.shape[1])]
    signs = np.where(leading < 0.0, -1.0, 1.0)
    u *= signs
    v *= signs
    return SvdResult(u=u, singular_values=s, v=v)


def nuclear_norm(m) -> float:
    """Sum of singular values."""
    m = as_matrix(m)
    return float(np.linalg.svd(m, compute_uv=False).sum())


def approximate_rank(m, delta: float = DEFAULT_RANK_DELTA) -> int:
    """Smallest k whose top-k singular values reach a (1 - delta) share.

    The share is evaluated as cumulative-sum / total-sum with a ``>=``
    comparison, so an exact tie at the threshold qualifies. Rejects all-zero
    matrices, for which the share criterion is undefined.
    """
    m = as_matrix(m)
    if not 0.0 <= delta < 1.0:
        raise ValueError(f"delta must lie in [0, 1), got {delta}")
    s = np.linalg.svd(m, compute_uv=False)
    cum = np.cumsum(s)
    total = cum[-1]
    if total <= 0.0:
        raise ValueError("approximate rank is undefined for an all-zero matrix")
    # Dividing by the cumulative total keeps the final share exactly 1.0.
    shares = cum / total
    k = int(np.argmax(shares >= (1.0 - delta))) + 1
    return k


def average_approximate_rank(ms: Iterable, delta: float = DEFAULT_RANK_DELTA) -> float:
    """Arithmetic mean of :func:`approximate_rank` over a non-empty sequence."""
    ranks = [approximate_rank(m, delta) for m in ms]
    if not ranks:
        raise ValueError("average_approximate_rank requires at least one matrix")
    return float(np.mean(ranks))
