"""Low-rank matrix completion via iterative singular-value shrinkage.

The solver is the Soft-Impute iteration: hold observed entries fixed from the
data, fill missing entries from the current iterate, decompose, subtract a
shrinkage level lam = sigma_max / zeta from every singular value (clamping at
zero), and rebuild. Iteration stops when the relative Frobenius change
between successive iterates drops to ``epsilon`` or the iteration budget
runs out; running out is reported through a flag rather than raised, so
callers embedded in training loops never abort on a hard instance.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Tuple

import numpy as np

from .linalg import as_matrix

__all__ = [
    "SoftImputeConfig",
    "ObservationMask",
    "CompletionResult",
    "project",
    "soft_impute",
    "reconstruct",
]


@dataclass(frozen=True)
class SoftImputeConfig:
    """Shrinkage divider, termination threshold, and iteration budget."""

    zeta: float = 50.0
    epsilon: float = 1e-4
    max_iterations: int = 100

    def __post_init__(self):
        if not self.zeta > 1.0:
            raise ValueError(f"zeta must exceed 1, got {self.zeta}")
        if not self.epsilon > 0.0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if int(self.max_iterations) < 1:
            raise ValueError("max_iterations must be at least 1")


class ObservationMask:
    """Set of observed (row, col) index pairs of a rows x cols matrix.

    Feasibility guard: every row and every column must contain at least one
    observed entry, otherwise completion has an unconstrained row/column and
    the mask is rejected.
    """

    def __init__(self, rows: int, cols: int, observed: Iterable[Tuple[int, int]]):
        rows, cols = int(rows), int(cols)
        if rows < 1 or cols < 1:
            raise ValueError("mask dimensions must be positive")
        arr = np.zeros((rows, cols), dtype=bool)
        for r, c in observed:
            r, c = int(r), int(c)
            if not (0 <= r < rows and 0 <= c < cols):
                raise ValueError(f"observed index ({r}, {c}) out of range for {rows}x{cols}")
            arr[r, c] = True
        self._init_from_array(arr)

    def _init_from_array(self, arr: np.ndarray):
        if not arr.any(axis=1).all():
            raise ValueError("infeasible mask: some row has no observed entry")
        if not arr.any(axis=0).all():
            raise ValueError("infeasible mask: some column has no observed entry")
        arr.setflags(write=False)
        self.rows, self.cols = arr.shape
        self._array = arr
        self._observed = None

    @classmethod
    def _from_bool_array(cls, arr: np.ndarray) -> "ObservationMask":
        mask = cls.__new__(cls)
        mask._init_from_array(np.array(arr, dtype=bool, copy=True))
        return mask

    @classmethod
    def full(cls, rows: int, cols: int) -> "ObservationMask":
        return cls._from_bool_array(np.ones((int(rows), int(cols)), dtype=bool))

    @classmethod
    def except_for(cls, rows: int, cols: int, removed: Iterable[Tuple[int, int]]) -> "ObservationMask":
        """Mask observing everything except ``removed``."""
        arr = np.ones((int(rows), int(cols)), dtype=bool)
        for r, c in removed:
            r, c = int(r), int(c)
            if not (0 <= r < arr.shape[0] and 0 <= c < arr.shape[1]):
                raise ValueError(f"removed index ({r}, {c}) out of range for {arr.shape}")
            arr[r, c] = False
        return cls._from_bool_array(arr)

    @property
    def observed(self) -> frozenset:
        if self._observed is None:
            rr, cc = np.nonzero(self._array)
            self._observed = frozenset(zip(rr.tolist(), cc.tolist()))
        return self._observed

    def to_array(self) -> np.ndarray:
        """Read-only boolean array, True at observed entries."""
        return self._array

    def __len__(self) -> int:
        return int(self._array.sum())


@dataclass
class CompletionResult:
    matrix: np.ndarray
    iterations: int
    converged: bool
    final_relative_change: float


def project(m, mask: ObservationMask, keep_observed: bool = True) -> np.ndarray:
    """Copy entries in the kept index set, zero everywhere else.

    ``keep_observed=True`` keeps the mask's observed set; ``False`` keeps its
    complement.
    """
    m = as_matrix(m)
    if m.shape != (mask.rows, mask.cols):
        raise ValueError(f"matrix shape {m.shape} does not match mask {(mask.rows, mask.cols)}")
    sel = mask.to_array()
    if not keep_observed:
        sel = ~sel
    return np.where(sel, m, 0.0)


def _relative_change(new: np.ndarray, old: np.ndarray) -> float:
    num = float(np.linalg.norm(new - old))
    if num == 0.0:
        return 0.0
    den = float(np.linalg.norm(old))
    if den == 0.0:
        return float("inf")
    return num / den


def soft_impute(m, mask: ObservationMask, config: SoftImputeConfig | None = None) -> CompletionResult:
    """Complete ``m`` on the mask's complement by iterative shrinkage.

    Values of ``m`` outside the observed set are ignored (they may even be
    non-finite); observed values must be finite. The returned matrix is the
    final shrunk iterate, finite everywhere.
    """
    if config is None:
        config = SoftImputeConfig()
    arr = np.array(m, dtype=np.float64, copy=True)
    if arr.shape != (mask.rows, mask.cols):
        raise ValueError(f"matrix shape {arr.shape} does not match mask {(mask.rows, mask.cols)}")
    obs = mask.to_array()
    if not np.all(np.isfinite(arr[obs])):
        raise ValueError("observed entries must be finite")
    data = np.where(obs, arr, 0.0)

    x = data.copy()
    change = 0.0
    converged = False
    iterations = 0
    for iterations in range(1, int(config.max_iterations) + 1):
        combined = np.where(obs, data, x)
        u, s, vt = np.linalg.svd(combined, full_matrices=False)
        lam = s[0] / config.zeta
        shrunk = np.maximum(s - lam, 0.0)
        x_new = (u * shrunk) @ vt
        change = _relative_change(x_new, x)
        x = x_new
        if change <= config.epsilon:
            converged = True
            break
    return CompletionResult(matrix=x, iterations=iterations, converged=converged, final_relative_change=change)


def reconstruct(q, removal: Iterable[Tuple[int, int]], config: SoftImputeConfig | None = None) -> CompletionResult:
    """Re-estimate the ``removal`` entries of ``q``; keep the rest bit-exact.

    Builds the observation mask as the complement of the removal set, runs
    :func:`soft_impute`, then splices: removed entries take their completed
    values while every retained entry keeps the original value unchanged.
    The removal set must leave at least one retained entry in every row and
    column (enforced by the mask constructor).
    """
    q = as_matrix(q)
    rows, cols = q.shape
    removal = {(int(r), int(c)) for r, c in removal}
    for r, c in removal:
        if not (0 <= r < rows and 0 <= c < cols):
            raise ValueError(f"removal index ({r}, {c}) out of range for {rows}x{cols}")
    if not removal:
        return CompletionResult(matrix=q.copy(), iterations=0, converged=True, final_relative_change=0.0)
    mask = ObservationMask.except_for(rows, cols, removal)
    res = soft_impute(q, mask, config)
    out = q.copy()
    rr = np.fromiter((r for r, _ in sorted(removal)), dtype=np.intp, count=len(removal))
    cc = np.fromiter((c for _, c in sorted(removal)), dtype=np.intp, count=len(removal))
    out[rr, cc] = res.matrix[rr, cc]
    return CompletionResult(
        matrix=out,
        iterations=res.iterations,
        converged=res.converged,
        final_relative_change=res.final_relative_change,
    )
