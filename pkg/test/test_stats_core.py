import numpy as np
import pytest
from numpy.testing import assert_allclose

from exceptions import EmptyAccumulator, EmptyCenter, ShapeMismatch
from stats_core import (
    CenterData,
    FeatureMoments,
    GlobalStats,
    accumulate_local,
    destandardize,
    finalize,
    merge,
    merge_all,
    standardize,
)


def random_partition(rng, n_rows, n_parts):
    cuts = np.sort(rng.choice(np.arange(1, n_rows), size=n_parts - 1, replace=False))
    return np.split(np.arange(n_rows), cuts)


class TestAccumulateLocal:
    def test_two_values(self):
        """Moments of a single column [1, 2]."""
        m = accumulate_local(np.array([[1.0], [2.0]]))
        assert m.count == 2
        assert_allclose(m.mean, [1.5])
        assert_allclose(m.m2, [0.5])

    def test_constant_column(self):
        """A constant column has zero m2."""
        m = accumulate_local(np.array([[5.0], [5.0], [5.0]]))
        assert_allclose(m.mean, [5.0])
        assert_allclose(m.m2, [0.0])

    def test_single_row(self):
        """One subject has zero deviation."""
        m = accumulate_local(np.array([[3.0]]))
        assert m.count == 1
        assert_allclose(m.mean, [3.0])
        assert_allclose(m.m2, [0.0])

    def test_vector_becomes_column(self):
        """A 1-D input is treated as one feature."""
        m = accumulate_local(np.array([1.0, 2.0, 3.0]))
        assert m.n_features == 1
        assert m.count == 3

    def test_empty_matrix(self):
        """No rows raises EmptyCenter."""
        with pytest.raises(EmptyCenter):
            accumulate_local(np.zeros((0, 4)))


class TestMerge:
    def test_merge_matches_concatenation(self):
        """[1, 2] merged with [4, 6] equals the moments of [1, 2, 4, 6]."""
        a = accumulate_local(np.array([[1.0], [2.0]]))
        b = accumulate_local(np.array([[4.0], [6.0]]))
        m = merge(a, b)
        assert m.count == 4
        assert_allclose(m.mean, [3.25])
        assert_allclose(m.m2, [14.75])

    def test_empty_is_identity(self):
        """Merging with empty moments returns the other operand."""
        a = accumulate_local(np.array([[1.0, 2.0], [3.0, 5.0]]))
        for m in (merge(a, FeatureMoments.empty(2)), merge(FeatureMoments.empty(2), a)):
            assert m.count == a.count
            assert_allclose(m.mean, a.mean)
            assert_allclose(m.m2, a.m2)

    def test_commutative(self):
        """merge(a, b) equals merge(b, a)."""
        rng = np.random.default_rng(0)
        a = accumulate_local(rng.normal(size=(7, 3)))
        b = accumulate_local(rng.normal(3.0, 2.0, size=(11, 3)))
        ab, ba = merge(a, b), merge(b, a)
        assert ab.count == ba.count
        assert_allclose(ab.mean, ba.mean, rtol=1e-12)
        assert_allclose(ab.m2, ba.m2, rtol=1e-12)

    def test_associative(self):
        """Grouping of merges does not change the result."""
        rng = np.random.default_rng(1)
        a, b, c = (accumulate_local(rng.normal(i, 1.0 + i, size=(5 + i, 4))) for i in range(3))
        left, right = merge(merge(a, b), c), merge(a, merge(b, c))
        assert_allclose(left.mean, right.mean, rtol=1e-9)
        assert_allclose(left.m2, right.m2, rtol=1e-9)

    def test_feature_mismatch(self):
        """Different feature counts cannot merge."""
        with pytest.raises(ShapeMismatch):
            merge(FeatureMoments.empty(2), FeatureMoments.empty(3))

    def test_merge_all_empty_needs_width(self):
        """merge_all of nothing returns empty moments only when the width is known."""
        assert merge_all([], n_features=3).count == 0
        with pytest.raises(EmptyAccumulator):
            merge_all([])


class TestFinalize:
    def test_population_std(self):
        """std = sqrt(m2 / count)."""
        stats = finalize(FeatureMoments(4, np.array([3.25]), np.array([14.75])))
        assert_allclose(stats.std, [np.sqrt(3.6875)])
        assert stats.n_total == 4

    def test_zero_m2_and_single_subject(self):
        """Zero spread and a single subject both give std 0."""
        assert_allclose(finalize(FeatureMoments(3, np.array([2.0]), np.array([0.0]))).std, [0.0])
        assert_allclose(finalize(accumulate_local(np.array([[7.0]]))).std, [0.0])

    def test_empty_accumulator(self):
        """Finalizing zero subjects raises EmptyAccumulator."""
        with pytest.raises(EmptyAccumulator):
            finalize(FeatureMoments.empty(2))

    @pytest.mark.parametrize("n_centers", [1, 2, 7, 16])
    def test_partitions_match_centralized(self, n_centers):
        """Any partition into centers reproduces the pooled mean and std."""
        rng = np.random.default_rng(n_centers)
        x = rng.normal(5.0, 3.0, size=(400, 30))
        for _ in range(10):
            parts = random_partition(rng, x.shape[0], n_centers)
            order = rng.permutation(len(parts))
            stats = finalize(merge_all(accumulate_local(x[parts[i]]) for i in order))
            assert stats.n_total == x.shape[0]
            assert_allclose(stats.mean, x.mean(axis=0), rtol=1e-10)
            assert_allclose(stats.std, x.std(axis=0), rtol=1e-10)


class TestStandardize:
    def test_pooled_standardization(self):
        """Standardized centers stack to zero mean and unit std."""
        rng = np.random.default_rng(3)
        x = rng.normal(2.0, 4.0, size=(300, 12))
        parts = np.array_split(x, 5)
        stats = finalize(merge_all(accumulate_local(p) for p in parts))
        pooled = np.vstack([standardize(p, stats) for p in parts])
        assert_allclose(pooled.mean(axis=0), 0.0, atol=1e-9)
        assert_allclose(pooled.std(axis=0), 1.0, atol=1e-9)
        assert_allclose(pooled, (x - x.mean(axis=0)) / x.std(axis=0), atol=1e-10)

    def test_identity_on_standard_data(self):
        """Data already at zero mean and unit std is unchanged."""
        rng = np.random.default_rng(4)
        x = rng.normal(size=(50, 3))
        x = (x - x.mean(axis=0)) / x.std(axis=0)
        assert_allclose(standardize(x, finalize(accumulate_local(x))), x, atol=1e-12)

    def test_zero_variance_column(self):
        """A constant feature standardizes to zeros instead of NaN."""
        x = np.column_stack([np.arange(6.0), np.full(6, 4.0)])
        out = standardize(x, finalize(accumulate_local(x)))
        assert np.all(np.isfinite(out))
        assert_allclose(out[:, 1], 0.0)

    def test_inverse(self):
        """destandardize undoes standardize."""
        rng = np.random.default_rng(5)
        x = rng.normal(1.0, 2.0, size=(20, 4))
        stats = finalize(accumulate_local(x))
        assert_allclose(destandardize(standardize(x, stats), stats), x, rtol=1e-12)

    def test_feature_mismatch(self):
        """Statistics for a different feature count are rejected."""
        stats = GlobalStats(np.zeros(3), np.ones(3), 10)
        with pytest.raises(ShapeMismatch):
            standardize(np.zeros((4, 2)), stats)


class TestSerialization:
    def test_moments_layout(self):
        """Header (F, count) then mean and m2 as little-endian f64."""
        m = accumulate_local(np.array([[1.0, 10.0], [3.0, 30.0]]))
        data = m.to_bytes()
        assert len(data) == 16 + 2 * 2 * 8
        assert int.from_bytes(data[:8], "little") == 2
        assert int.from_bytes(data[8:16], "little") == 2
        back = FeatureMoments.from_bytes(data)
        assert back.count == 2
        assert_allclose(back.mean, m.mean)
        assert_allclose(back.m2, m.m2)


class TestCenterData:
    def test_row_mismatch(self):
        """x and y must have the same number of rows."""
        with pytest.raises(ShapeMismatch):
            CenterData(np.zeros((3, 2)), np.zeros((4, 1)))

    def test_empty_center(self):
        """A center needs at least one subject."""
        with pytest.raises(EmptyCenter):
            CenterData(np.zeros((0, 2)), np.zeros((0, 1)))

    def test_labels_length(self):
        """One label per subject."""
        with pytest.raises(ShapeMismatch):
            CenterData(np.zeros((3, 2)), np.zeros((3, 1)), labels=["a", "b"])


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
