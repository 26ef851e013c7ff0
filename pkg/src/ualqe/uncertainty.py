"""Value-estimate uncertainty scoring and removal-entry selection.

Two quantifiers are provided. The count-based one hashes continuous
(state, action) pairs to 64-bit SimHash codes and scores a pair by the
inverse of its visit count. The ensemble one scores a pair by the population
standard deviation of a group of independently trained value estimators.
Either can score a full states x actions grid, producing the uncertainty
matrix from which the highest-uncertainty entries per row are selected.
"""

from __future__ import annotations

import json
import math
from typing import Iterable, Sequence, Tuple

import numpy as np

__all__ = [
    "HASH_BITS",
    "CountTable",
    "EnsembleScorer",
    "StackedEnsembleScorer",
    "hash_state_action",
    "record_visit",
    "count_based_uncertainty",
    "ensemble_uncertainty",
    "uncertainty_matrix",
    "per_row_removal_count",
    "select_top_p_per_row",
    "enforce_column_retention",
]

HASH_BITS = 64
_BIT_WEIGHTS = (np.uint64(1) << np.arange(HASH_BITS, dtype=np.uint64))


class CountTable:
    """SimHash visit counter over continuous (state, action) pairs.

    Hashing projects the concatenated, per-dimension-normalized pair onto 64
    fixed random directions; bit b is 1 iff the projection onto direction b
    is non-negative (an exactly-zero projection also hashes to 1, so the rule
    is total). Counts only grow; the directions are fixed at construction.
    """

    def __init__(self, state_dim: int, action_dim: int, rng: np.random.Generator,
                 state_scale=None, action_scale=None):
        self.state_dim = int(state_dim)
        self.action_dim = int(action_dim)
        dim = self.state_dim + self.action_dim
        if dim < 1:
            raise ValueError("state_dim + action_dim must be positive")
        self.hyperplanes = rng.standard_normal((HASH_BITS, dim))
        self.hyperplanes.setflags(write=False)
        self.state_scale = self._as_scale(state_scale, self.state_dim, "state_scale")
        self.action_scale = self._as_scale(action_scale, self.action_dim, "action_scale")
        self.counts: dict[int, int] = {}

    @staticmethod
    def _as_scale(scale, dim, name) -> np.ndarray:
        if scale is None:
            arr = np.ones(dim)
        else:
            arr = np.broadcast_to(np.asarray(scale, dtype=np.float64), (dim,)).copy()
        if not np.all(np.isfinite(arr)) or np.any(arr <= 0.0):
            raise ValueError(f"{name} must be positive and finite")
        arr.setflags(write=False)
        return arr

    def _pairs(self, states, actions) -> np.ndarray:
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
        if states.shape[1] != self.state_dim or actions.shape[1] != self.action_dim:
            raise ValueError(
                f"expected dims ({self.state_dim}, {self.action_dim}), "
                f"got ({states.shape[1]}, {actions.shape[1]})"
            )
        if states.shape[0] != actions.shape[0]:
            raise ValueError("states and actions must pair up one-to-one")
        return np.hstack([states / self.state_scale, actions / self.action_scale])

    def codes(self, states, actions) -> np.ndarray:
        """64-bit SimHash codes for paired rows of states and actions."""
        x = self._pairs(states, actions)
        bits = (x @ self.hyperplanes.T) >= 0.0
        return bits.astype(np.uint64) @ _BIT_WEIGHTS

    def code(self, state, action) -> int:
        return int(self.codes(state, action)[0])

    def record(self, state, action):
        self.record_batch(np.atleast_2d(state), np.atleast_2d(action))

    def record_batch(self, states, actions):
        counts = self.counts
        for c in self.codes(states, actions).tolist():
            counts[c] = counts.get(c, 0) + 1

    def count(self, state, action) -> int:
        return self.counts.get(self.code(state, action), 0)

    def score_pairs(self, states, actions) -> np.ndarray:
        """Inverse visit count per paired row; 1.0 for never-visited codes."""
        counts = self.counts
        return np.array(
            [1.0 / n if (n := counts.get(c, 0)) > 0 else 1.0
             for c in self.codes(states, actions).tolist()]
        )

    def score_grid(self, states, actions) -> np.ndarray:
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
        ns, na = states.shape[0], actions.shape[0]
        grid_s = np.repeat(states, na, axis=0)
        grid_a = np.tile(actions, (ns, 1))
        return self.score_pairs(grid_s, grid_a).reshape(ns, na)

    # -- serialization ------------------------------------------------------

    def to_json_dict(self) -> dict:
        return {
            "state_dim": self.state_dim,
            "action_dim": self.action_dim,
            "state_scale": self.state_scale.tolist(),
            "action_scale": self.action_scale.tolist(),
            "hyperplanes": self.hyperplanes.tolist(),
            "counts": {str(code): n for code, n in sorted(self.counts.items())},
        }

    @classmethod
    def from_json_dict(cls, payload: dict) -> "CountTable":
        table = cls.__new__(cls)
        table.state_dim = int(payload["state_dim"])
        table.action_dim = int(payload["action_dim"])
        table.state_scale = cls._as_scale(payload["state_scale"], table.state_dim, "state_scale")
        table.action_scale = cls._as_scale(payload["action_scale"], table.action_dim, "action_scale")
        planes = np.asarray(payload["hyperplanes"], dtype=np.float64)
        if planes.shape != (HASH_BITS, table.state_dim + table.action_dim):
            raise ValueError(f"bad hyperplane shape {planes.shape}")
        planes.setflags(write=False)
        table.hyperplanes = planes
        table.counts = {int(code): int(n) for code, n in payload["counts"].items()}
        return table

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh)

    @classmethod
    def load(cls, path) -> "CountTable":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json_dict(json.load(fh))


class _PairScorer:
    """Mixin mapping a pairwise scorer over a states x actions grid."""

    def score_grid(self, states, actions) -> np.ndarray:
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
        ns, na = states.shape[0], actions.shape[0]
        grid_s = np.repeat(states, na, axis=0)
        grid_a = np.tile(actions, (ns, 1))
        return self.score_pairs(grid_s, grid_a).reshape(ns, na)


class EnsembleScorer(_PairScorer):
    """Scores a pair by the population std of an ensemble's value estimates.

    ``members`` must expose ``forward(x) -> (n, 1)`` on stacked
    (state, action) inputs; at least two members are required.
    """

    def __init__(self, members: Sequence):
        members = list(members)
        if len(members) < 2:
            raise ValueError("ensemble scoring needs at least 2 members")
        self.members = members

    def score_pairs(self, states, actions) -> np.ndarray:
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
        x = np.hstack([states, actions])
        estimates = np.stack([m.forward(x).ravel() for m in self.members])
        return estimates.std(axis=0, ddof=0)


class StackedEnsembleScorer(_PairScorer):
    """Same scoring rule over a stacked ensemble (``forward_all -> (K, n)``)."""

    def __init__(self, stacked):
        if getattr(stacked, "count", 0) < 2:
            raise ValueError("ensemble scoring needs at least 2 members")
        self.stacked = stacked

    def score_pairs(self, states, actions) -> np.ndarray:
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
        x = np.hstack([states, actions])
        return self.stacked.forward_all(x).std(axis=0, ddof=0)


def hash_state_action(state, action, table: CountTable) -> int:
    """Deterministic 64-bit code of a (state, action) pair under the table."""
    return table.code(state, action)


def record_visit(table: CountTable, state, action) -> CountTable:
    """Increment the visit count at the pair's code; returns the table."""
    table.record(state, action)
    return table


def count_based_uncertainty(table: CountTable, state, action) -> float:
    """1 / N(state, action); 1.0 when the pair was never visited."""
    n = table.count(state, action)
    return 1.0 / n if n > 0 else 1.0


def ensemble_uncertainty(estimates: Sequence[float]) -> float:
    """Population standard deviation of at least two value estimates."""
    arr = np.asarray(estimates, dtype=np.float64).ravel()
    if arr.size < 2:
        raise ValueError("ensemble uncertainty needs at least 2 estimates")
    return float(arr.std(ddof=0))


def uncertainty_matrix(states, actions, quantifier) -> np.ndarray:
    """Score every (state_i, action_j) grid cell with the given quantifier.

    Rows index states, columns index actions. The quantifier is anything with
    a ``score_grid(states, actions)`` method (a :class:`CountTable` or an
    :class:`EnsembleScorer`).
    """
    u = np.asarray(quantifier.score_grid(states, actions), dtype=np.float64)
    if np.any(u < 0.0):
        raise ValueError("uncertainty scores must be non-negative")
    return u


def per_row_removal_count(p: float, cols: int) -> int:
    """ceil(p% of cols), with a tiny snap so exact products stay exact."""
    if not 0.0 <= p < 100.0:
        raise ValueError(f"percentage must lie in [0, 100), got {p}")
    return int(math.ceil(p * cols / 100.0 - 1e-12))


def select_top_p_per_row(u, p: float) -> frozenset:
    """Per row, the ceil(p% of cols) highest-uncertainty entries.

    Ties break toward the smaller column index. A feasibility guard then
    walks columns in ascending index: any column that would lose every entry
    gets its lowest-uncertainty removal rescinded (ties toward smaller row),
    so no column is ever emptied.
    """
    u = np.asarray(u, dtype=np.float64)
    if u.ndim != 2 or u.size == 0:
        raise ValueError("uncertainty matrix must be non-empty and 2-D")
    rows, cols = u.shape
    k = per_row_removal_count(p, cols)
    if k > cols - 1:
        raise ValueError(f"removing {k} of {cols} entries per row would empty a row")
    if k == 0:
        return frozenset()
    # Stable sort of the negated scores: equal scores keep ascending column order.
    order = np.argsort(-u, axis=1, kind="stable")[:, :k]
    entries = {(r, int(c)) for r in range(rows) for c in order[r]}
    return enforce_column_retention(entries, rows, cols, scores=u)


def enforce_column_retention(entries, rows: int, cols: int, scores=None) -> frozenset:
    """Rescind one removal from any column that would lose all its entries.

    Columns are processed in ascending index. Within a full column the
    rescinded entry is the lowest-scoring one (ties toward the smaller row);
    without scores, the smallest row index is rescinded.
    """
    entries = set((int(r), int(c)) for r, c in entries)
    per_col = np.zeros(cols, dtype=np.intp)
    for _, c in entries:
        per_col[c] += 1
    for c in range(cols):
        if per_col[c] == rows:
            in_col = [r for r, cc in entries if cc == c]
            if scores is None:
                victim = min(in_col)
            else:
                victim = min(in_col, key=lambda r: (scores[r, c], r))
            entries.discard((victim, c))
    return frozenset(entries)
