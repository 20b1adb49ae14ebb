import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from surrojive.data_model import (AggregateTable, CellFoldAggregate, DataFormatError, Dataset,
                                  UnitRecord, aggregate, assign_folds, read_aggregates,
                                  read_units, write_aggregates, write_units)

from conftest import make_dataset


def _plain(K, n, d=1, seed=0):
    rng = np.random.default_rng(seed)
    return Dataset(np.repeat(np.arange(1, K + 1), n), rng.standard_normal((K * n, d)),
                   rng.standard_normal(K * n), K)


class TestAssignFolds:
    def test_balanced_when_divisible(self):
        ds = assign_folds(_plain(1, 4), 2, seed=0)
        assert sorted(np.bincount(ds.fold_ids)[1:]) == [2, 2]

    def test_ragged_sizes_differ_by_one(self):
        ds = assign_folds(_plain(1, 5), 2, seed=0)
        assert sorted(np.bincount(ds.fold_ids)[1:]) == [2, 3]

    def test_deterministic(self):
        a = assign_folds(_plain(3, 10), 3, seed=42)
        b = assign_folds(_plain(3, 10), 3, seed=42)
        np.testing.assert_array_equal(a.fold_ids, b.fold_ids)

    def test_seed_changes_labels(self):
        a = assign_folds(_plain(3, 10), 2, seed=1)
        b = assign_folds(_plain(3, 10), 2, seed=2)
        assert not np.array_equal(a.fold_ids, b.fold_ids)

    @pytest.mark.parametrize("L", [0, 1])
    def test_rejects_too_few_folds(self, L):
        with pytest.raises(ValueError, match="at least 2 folds"):
            assign_folds(_plain(2, 4), L, seed=0)

    def test_rejects_small_cells(self):
        with pytest.raises(ValueError, match="fewer than"):
            assign_folds(_plain(2, 3), 5, seed=0)

    def test_interleaved_cells(self):
        ds = _plain(3, 6)
        shuffled = ds.take(np.random.default_rng(0).permutation(ds.num_units))
        out = assign_folds(shuffled, 3, seed=0)
        counts = np.zeros((3, 3), int)
        np.add.at(counts, (out.cell_ids - 1, out.fold_ids - 1), 1)
        assert np.all(counts == 2)

    @settings(max_examples=30, deadline=None)
    @given(K=st.integers(1, 6), n=st.integers(2, 13), L=st.integers(2, 5), seed=st.integers(0, 99))
    def test_balance_property(self, K, n, L, seed):
        if n < L:
            return
        ds = assign_folds(_plain(K, n), L, seed)
        counts = np.zeros((K, L), int)
        np.add.at(counts, (ds.cell_ids - 1, ds.fold_ids - 1), 1)
        assert counts.max() - counts.min() <= 1
        if n % L == 0:
            assert np.all(counts == n // L)


class TestDatasetValidation:
    def test_unequal_cells_rejected(self):
        with pytest.raises(ValueError, match="same number"):
            Dataset([1, 1, 2], np.zeros((3, 1)), np.zeros(3), 2)

    def test_cell_out_of_range(self):
        with pytest.raises(ValueError, match="cell ids"):
            Dataset([1, 3], np.zeros((2, 1)), np.zeros(2), 2)

    def test_fold_out_of_range(self):
        with pytest.raises(ValueError, match="fold ids"):
            Dataset([1, 1], np.zeros((2, 1)), np.zeros(2), 1, fold_ids=[1, 3], num_folds=2)

    def test_records_round_trip(self):
        ds = make_dataset(3, 4, 2, 2)
        back = Dataset.from_records(ds.records(), ds.num_cells, ds.num_folds)
        np.testing.assert_array_equal(back.surrogates, ds.surrogates)
        np.testing.assert_array_equal(back.fold_ids, ds.fold_ids)

    def test_records_inconsistent_dimension(self):
        recs = [UnitRecord(1, 1, (1.0,), 0.0), UnitRecord(1, 2, (1.0, 2.0), 0.0)]
        with pytest.raises(ValueError, match="inconsistent"):
            Dataset.from_records(recs, 1, 2)


class TestAggregate:
    def test_means(self):
        ds = Dataset([1, 1, 1, 1], [[2.0], [4.0], [1.0], [1.0]], [4.0, 6.0, 0.0, 0.0], 1,
                     fold_ids=[1, 1, 2, 2], num_folds=2)
        agg = aggregate(ds)
        first = agg.to_records()[0]
        assert first == CellFoldAggregate(1, 1, (3.0,), 5.0, 2)

    def test_single_unit_fold(self):
        ds = Dataset([1, 1], [[1.5], [2.5]], [7.0, 8.0], 1, fold_ids=[1, 2], num_folds=2)
        recs = aggregate(ds).to_records()
        assert recs[1].mean_surrogate == (2.5,) and recs[1].mean_outcome == 8.0

    def test_componentwise_mean(self):
        ds = Dataset([1, 1, 1, 1], [[1, 0], [0, 1], [0, 0], [0, 0]], np.zeros(4), 1,
                     fold_ids=[1, 1, 2, 2], num_folds=2)
        assert aggregate(ds).to_records()[0].mean_surrogate == (0.5, 0.5)

    def test_counts_sum_to_cell_size(self):
        ds = make_dataset(4, 7, 2, 3)
        agg = aggregate(ds)
        assert len(agg) == 12
        np.testing.assert_array_equal(agg.counts.sum(axis=1), 7)

    def test_requires_folds(self):
        with pytest.raises(ValueError, match="fold"):
            aggregate(_plain(2, 4))

    def test_linear_in_outcome(self):
        ds = make_dataset(4, 6, 2, 3)
        a = aggregate(ds)
        b = aggregate(ds.with_outcomes(2.5 * ds.outcomes))
        np.testing.assert_allclose(b.y_mean, 2.5 * a.y_mean, rtol=1e-14)

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_permutation_invariance(self, seed):
        ds = make_dataset(3, 6, 2, 2, seed=seed % 7)
        perm = np.random.default_rng(seed).permutation(ds.num_units)
        a, b = aggregate(ds), aggregate(ds.take(perm))
        np.testing.assert_allclose(a.s_mean, b.s_mean, rtol=1e-13, atol=1e-15)
        np.testing.assert_allclose(a.y_mean, b.y_mean, rtol=1e-13, atol=1e-15)

    def test_table_from_records_roundtrip(self):
        agg = aggregate(make_dataset(3, 4, 2, 2))
        back = AggregateTable.from_records(agg.to_records())
        np.testing.assert_array_equal(back.s_mean, agg.s_mean)

    def test_table_missing_pair(self):
        recs = aggregate(make_dataset(2, 4, 1, 2)).to_records()[:-1]
        with pytest.raises(ValueError, match="missing"):
            AggregateTable.from_records(recs)


class TestCsv:
    def test_aggregate_round_trip(self, tmp_path):
        agg = aggregate(make_dataset(2, 4, 3, 2, seed=5))
        path = tmp_path / "agg.csv"
        write_aggregates(agg, path)
        back = read_aggregates(path)
        assert back == agg.to_records()

    def test_header_is_exact(self, tmp_path):
        path = tmp_path / "agg.csv"
        write_aggregates(aggregate(make_dataset(2, 4, 2, 2)), path)
        raw = path.read_bytes()
        assert raw.startswith(b"cell_id,fold_id,count,s_mean_1,s_mean_2,y_mean\n")
        assert b"\r" not in raw

    def test_duplicate_key(self, tmp_path):
        path = tmp_path / "dup.csv"
        path.write_text("cell_id,fold_id,count,s_mean_1,y_mean\n1,1,2,0.5,1\n1,2,2,0.5,1\n1,1,2,1,1\n")
        with pytest.raises(DataFormatError, match="row 4: duplicate key"):
            read_aggregates(path)

    def test_inconsistent_dimension(self, tmp_path):
        path = tmp_path / "dim.csv"
        path.write_text("cell_id,fold_id,count,s_mean_1,s_mean_2,y_mean\n"
                        "1,1,2,0.5,0.1,1\n1,2,2,0.5,0.1,0.2,1\n")
        with pytest.raises(DataFormatError, match="row 3:.*surrogate columns"):
            read_aggregates(path)

    def test_malformed_header(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("cell,fold_id,count,s_mean_1,y_mean\n1,1,2,0.5,1\n")
        with pytest.raises(DataFormatError, match="row 1: malformed header"):
            read_aggregates(path)

    def test_bad_number(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("cell_id,fold_id,count,s_mean_1,y_mean\n1,1,2,abc,1\n")
        with pytest.raises(DataFormatError, match="row 2"):
            read_aggregates(path)

    def test_units_round_trip(self, tmp_path):
        ds = make_dataset(3, 4, 2, 2, seed=9)
        path = tmp_path / "units.csv"
        write_units(ds, path)
        assert path.read_text().splitlines()[0] == "cell_id,fold_id,s_1,s_2,y"
        back = read_units(path)
        np.testing.assert_array_equal(back.surrogates, ds.surrogates)
        np.testing.assert_array_equal(back.outcomes, ds.outcomes)
        np.testing.assert_array_equal(back.fold_ids, ds.fold_ids)

    def test_units_without_folds(self, tmp_path):
        path = tmp_path / "units.csv"
        write_units(_plain(2, 3), path)
        assert not read_units(path).has_folds
