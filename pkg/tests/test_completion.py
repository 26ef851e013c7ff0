import numpy as np
import pytest

from ualqe.completion import (
    CompletionResult,
    ObservationMask,
    SoftImputeConfig,
    project,
    reconstruct,
    soft_impute,
)
from ualqe.linalg import nuclear_norm


def rank_one_ratio_oracle(m, hidden):
    """Exact completion of a rank-1 matrix by row/column ratio propagation.

    For hidden (i, j), pick observed anchors (i, k), (l, k), (l, j) and use
    m[i, j] = m[i, k] * m[l, j] / m[l, k].
    """
    hidden = set(hidden)
    out = m.copy()
    rows, cols = m.shape
    for i, j in hidden:
        done = False
        for k in range(cols):
            for l in range(rows):
                if k == j or l == i:
                    continue
                if (i, k) in hidden or (l, k) in hidden or (l, j) in hidden:
                    continue
                out[i, j] = m[i, k] * m[l, j] / m[l, k]
                done = True
                break
            if done:
                break
        assert done, "oracle needs an observed 2x2 anchor"
    return out


def feasible_random_removal(rng, rows, cols, count):
    while True:
        flat = rng.permutation(rows * cols)[:count]
        removal = {(int(i) // cols, int(i) % cols) for i in flat}
        per_row = np.zeros(rows)
        per_col = np.zeros(cols)
        for r, c in removal:
            per_row[r] += 1
            per_col[c] += 1
        if per_row.max() < cols and per_col.max() < rows:
            return removal


class TestConfig:
    def test_defaults(self):
        cfg = SoftImputeConfig()
        assert cfg.zeta == 50.0 and cfg.epsilon == 1e-4 and cfg.max_iterations == 100

    @pytest.mark.parametrize("kwargs", [
        {"zeta": 1.0}, {"zeta": 0.5}, {"epsilon": 0.0}, {"epsilon": -1e-4}, {"max_iterations": 0},
    ])
    def test_rejects_bad_values(self, kwargs):
        with pytest.raises(ValueError):
            SoftImputeConfig(**kwargs)


class TestObservationMask:
    def test_out_of_range(self):
        with pytest.raises(ValueError):
            ObservationMask(2, 2, [(0, 0), (2, 0), (1, 1)])

    def test_empty_row_infeasible(self):
        with pytest.raises(ValueError):
            ObservationMask(2, 2, [(0, 0), (0, 1)])

    def test_empty_column_infeasible(self):
        with pytest.raises(ValueError):
            ObservationMask(2, 2, [(0, 0), (1, 0)])

    def test_full_and_except_for(self):
        full = ObservationMask.full(2, 3)
        assert len(full) == 6
        partial = ObservationMask.except_for(2, 3, [(0, 1)])
        assert (0, 1) not in partial.observed
        assert len(partial) == 5

    def test_array_is_readonly(self):
        mask = ObservationMask.full(2, 2)
        with pytest.raises(ValueError):
            mask.to_array()[0, 0] = False


class TestProject:
    def test_full_mask_identity(self):
        m = np.arange(6.0).reshape(2, 3)
        np.testing.assert_array_equal(project(m, ObservationMask.full(2, 3)), m)

    def test_full_mask_complement_is_zero(self):
        m = np.arange(6.0).reshape(2, 3) + 1
        out = project(m, ObservationMask.full(2, 3), keep_observed=False)
        np.testing.assert_array_equal(out, np.zeros((2, 3)))

    def test_diagonal_selection(self):
        m = np.array([[1.0, 2.0], [3.0, 4.0]])
        mask = ObservationMask(2, 2, [(0, 0), (1, 1)])
        np.testing.assert_array_equal(project(m, mask), [[1.0, 0.0], [0.0, 4.0]])

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            project(np.zeros((3, 3)), ObservationMask.full(2, 2))


class TestSoftImpute:
    def test_fully_observed_huge_zeta(self):
        rng = np.random.default_rng(1)
        m = rng.standard_normal((4, 4))
        res = soft_impute(m, ObservationMask.full(4, 4), SoftImputeConfig(zeta=1e9))
        assert res.converged
        assert np.linalg.norm(res.matrix - m) / np.linalg.norm(m) < 1e-6

    def test_all_zero_observed(self):
        mask = ObservationMask.except_for(3, 3, [(1, 1)])
        res = soft_impute(np.zeros((3, 3)), mask)
        assert res.iterations == 1
        assert res.converged
        np.testing.assert_array_equal(res.matrix, np.zeros((3, 3)))

    def test_ignores_unobserved_values(self):
        m = np.array([[1.0, 2.0], [2.0, np.nan]])
        mask = ObservationMask.except_for(2, 2, [(1, 1)])
        res = soft_impute(m, mask)
        assert np.all(np.isfinite(res.matrix))

    def test_rejects_non_finite_observed(self):
        m = np.array([[1.0, np.inf], [2.0, 4.0]])
        with pytest.raises(ValueError):
            soft_impute(m, ObservationMask.full(2, 2))

    def test_converged_flag_matches_final_change(self):
        rng = np.random.default_rng(2)
        cfg = SoftImputeConfig()
        for _ in range(5):
            m = np.outer(rng.standard_normal(6), rng.standard_normal(6))
            removal = feasible_random_removal(rng, 6, 6, 8)
            mask = ObservationMask.except_for(6, 6, removal)
            res = soft_impute(m, mask, cfg)
            if res.converged:
                assert res.final_relative_change <= cfg.epsilon
            else:
                assert res.iterations == cfg.max_iterations

    def test_shrinkage_never_inflates_nuclear_norm(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            m = rng.standard_normal((8, 2)) @ rng.standard_normal((2, 8))
            removal = feasible_random_removal(rng, 8, 8, 12)
            mask = ObservationMask.except_for(8, 8, removal)
            zero_filled = project(m, mask)
            res = soft_impute(m, mask)
            assert nuclear_norm(res.matrix) <= nuclear_norm(zero_filled) + 1e-6


class TestRankOneRecovery:
    def test_hidden_permutation_entries(self):
        # Hide the cyclic pattern (i, i+1 mod 4), one entry per row and column.
        m = np.outer([1.0, 2.0, 3.0, 4.0], [1.0, 0.5, 2.0, 1.0])
        hidden = {(i, (i + 1) % 4) for i in range(4)}
        oracle = rank_one_ratio_oracle(m, hidden)
        np.testing.assert_allclose(oracle, m, rtol=1e-12)  # oracle is exact on rank-1
        res = reconstruct(m, hidden)
        rr, cc = zip(*sorted(hidden))
        rel = np.linalg.norm(res.matrix[rr, cc] - m[rr, cc]) / np.linalg.norm(m[rr, cc])
        assert rel < 0.05


class TestReconstruct:
    def test_empty_removal_is_identity(self):
        rng = np.random.default_rng(4)
        m = rng.standard_normal((5, 5))
        res = reconstruct(m, set())
        assert res.iterations == 0 and res.converged
        assert np.array_equal(res.matrix, m)

    def test_single_entry_restored_others_untouched(self):
        m = np.outer([1.0, 2.0, 3.0, 4.0], [1.0, 0.5, 2.0, 1.0])
        res = reconstruct(m, {(2, 1)})
        assert abs(res.matrix[2, 1] - m[2, 1]) / abs(m[2, 1]) < 0.05
        untouched = ~np.isin(np.arange(16).reshape(4, 4), [2 * 4 + 1])
        assert np.array_equal(res.matrix[untouched], m[untouched])

    def test_splices_only_removed_entries(self):
        rng = np.random.default_rng(6)
        for _ in range(5):
            m = rng.standard_normal((7, 9))
            removal = feasible_random_removal(rng, 7, 9, 15)
            res = reconstruct(m, removal)
            keep = np.ones((7, 9), dtype=bool)
            for r, c in removal:
                keep[r, c] = False
            assert np.array_equal(res.matrix[keep], m[keep])

    def test_rank3_random_removal(self):
        # Truth built from 50x3 times 3x50 random factors; a fifth of the
        # entries re-estimated.
        rng = np.random.default_rng(8)
        truth = rng.standard_normal((50, 3)) @ rng.standard_normal((3, 50))
        removal = feasible_random_removal(rng, 50, 50, 500)
        res = reconstruct(truth, removal)
        rr, cc = zip(*sorted(removal))
        rel = np.linalg.norm(res.matrix[rr, cc] - truth[rr, cc]) / np.linalg.norm(truth[rr, cc])
        assert rel < 0.05

    def test_removal_out_of_range(self):
        with pytest.raises(ValueError):
            reconstruct(np.ones((2, 2)), {(0, 5)})

    def test_full_row_removal_infeasible(self):
        with pytest.raises(ValueError):
            reconstruct(np.ones((3, 3)), {(0, 0), (0, 1), (0, 2)})

    def test_exact_recovery_property(self):
        # Sampled-down version of the full acceptance check: random low-rank
        # matrices with 30% removed recover within 5% whole-matrix error.
        rng = np.random.default_rng(9)
        failures = 0
        trials = 24
        for t in range(trials):
            rank = t % 3 + 1
            truth = rng.standard_normal((50, rank)) @ rng.standard_normal((rank, 50))
            removal = feasible_random_removal(rng, 50, 50, 750)
            res = reconstruct(truth, removal)
            rel = np.linalg.norm(res.matrix - truth) / np.linalg.norm(truth)
            if rel >= 0.05:
                failures += 1
        assert failures <= max(1, int(0.05 * trials))


def test_result_type():
    res = reconstruct(np.eye(3) + 1.0, set())
    assert isinstance(res, CompletionResult)
