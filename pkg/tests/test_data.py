"""Dataset loading, subsetting, splitting, and standardization tests."""
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from twostep.data import (
    INPUT_COLUMNS,
    TARGET_COLUMNS,
    DataError,
    DatasetHandle,
    Standardizer,
    compute_activation_targets,
    draw_subset_indices,
    generate_synthetic_activation,
    load_csv,
    make_split,
    make_subset,
    manifest_path_for,
    subset_size,
    train_size,
    write_csv,
)


def tiny_handle(n=10, n_in=3, n_out=2, seed=0):
    rng = np.random.default_rng(seed)
    return DatasetHandle(
        features=rng.normal(size=(n, n_in)),
        targets=rng.uniform(size=(n, n_out)),
        feature_names=tuple(f"x{i}" for i in range(n_in)),
        target_names=tuple(f"y{i}" for i in range(n_out)),
        provenance={"kind": "test"},
    )


class TestDatasetHandle:
    def test_rejects_nan(self):
        f = np.zeros((2, 2))
        f[0, 0] = np.nan
        with pytest.raises(DataError):
            DatasetHandle(f, np.zeros((2, 1)), ("a", "b"), ("t",), {})

    def test_rejects_mismatched_names(self):
        with pytest.raises(DataError):
            DatasetHandle(np.zeros((2, 2)), np.zeros((2, 1)), ("a",), ("t",), {})

    def test_rejects_empty(self):
        with pytest.raises(DataError):
            DatasetHandle(np.zeros((0, 2)), np.zeros((0, 1)), ("a", "b"), ("t",), {})


class TestCsvRoundTrip:
    def test_load_well_formed(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("a,b,t\n1,2,3\n4,5,6\n7,8,9\n")
        h = load_csv(str(p), targets=["t"])
        assert h.n_samples == 3
        assert h.feature_names == ("a", "b")
        assert h.targets[:, 0].tolist() == [3.0, 6.0, 9.0]

    def test_error_names_row_and_column(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("a,b,c,d\n1,2,3,4\n1,2,3,abc\n")
        with pytest.raises(DataError, match="row 2, column 4"):
            load_csv(str(p), targets=["d"])

    def test_ragged_row(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("a,b\n1,2\n1\n")
        with pytest.raises(DataError, match="row 2"):
            load_csv(str(p), targets=["b"])

    def test_rejects_inf_cell(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("a,b\n1,inf\n")
        with pytest.raises(DataError, match="row 1, column 2"):
            load_csv(str(p), targets=["b"])

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError, match="not found"):
            load_csv(str(tmp_path / "nope.csv"), targets=["t"])

    def test_manifest_designates_targets(self, tmp_path):
        p = tmp_path / "d.csv"
        h = tiny_handle(n=5)
        write_csv(h, str(p))
        assert manifest_path_for(str(p)).endswith("d.csv.manifest.json")
        back = load_csv(str(p))  # targets read from sidecar
        assert back.target_names == h.target_names

    def test_round_trip_exact(self, tmp_path):
        h = tiny_handle(n=20, seed=3)
        p = tmp_path / "rt.csv"
        write_csv(h, str(p))
        back = load_csv(str(p))
        np.testing.assert_allclose(back.features, h.features, rtol=1e-15, atol=0)
        np.testing.assert_allclose(back.targets, h.targets, rtol=1e-15, atol=0)


class TestSubset:
    def test_huge_input_cardinality(self):
        # 19.7M rows at p=0.00025 must give exactly 4925 indices without
        # materializing anything of that size.
        idx = draw_subset_indices(19_700_000, 0.00025, 123)
        assert idx.shape[0] == 4925
        assert idx.shape[0] == subset_size(19_700_000, 0.00025)
        assert np.unique(idx).size == 4925
        assert np.all(np.diff(idx) > 0)
        assert 0 <= idx[0] and idx[-1] < 19_700_000

    def test_full_fraction_is_identity(self):
        idx = draw_subset_indices(100, 1.0, 5)
        assert idx.tolist() == list(range(100))

    def test_seed_behavior(self):
        a = draw_subset_indices(10_000, 0.5, 1)
        b = draw_subset_indices(10_000, 0.5, 1)
        c = draw_subset_indices(10_000, 0.5, 2)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_minimum_one_row(self):
        assert draw_subset_indices(10, 0.001, 0).shape[0] == 1

    def test_rejects_bad_fraction(self):
        with pytest.raises(DataError):
            draw_subset_indices(10, 0.0, 0)
        with pytest.raises(DataError):
            draw_subset_indices(10, 1.5, 0)

    @given(
        st.integers(min_value=1, max_value=500),
        st.floats(min_value=0.01, max_value=1.0),
        st.integers(min_value=0, max_value=2**32),
    )
    @settings(max_examples=100)
    def test_cardinality_and_uniqueness(self, n, p, seed):
        idx = draw_subset_indices(n, p, seed)
        assert idx.shape[0] == max(1, math.floor(p * n + 1e-9))
        assert np.unique(idx).size == idx.shape[0]
        assert np.all((0 <= idx) & (idx < n))

    def test_view_gathers_rows(self):
        h = tiny_handle(n=50)
        v = make_subset(h, 0.2, 9)
        assert v.n_rows == 10
        np.testing.assert_array_equal(v.features(), h.features[v.indices])


class TestSplit:
    def test_eighty_twenty(self):
        h = tiny_handle(n=100)
        s = make_split(h, 0.8, 1)
        assert s.train_indices.shape[0] == 80
        assert s.val_indices.shape[0] == 20

    def test_fifty_fifty(self):
        h = tiny_handle(n=100)
        s = make_split(h, 0.5, 1)
        assert s.train_indices.shape[0] == 50

    def test_two_rows(self):
        h = tiny_handle(n=2)
        s = make_split(h, 0.5, 1)
        assert s.train_indices.shape[0] == 1
        assert s.val_indices.shape[0] == 1

    def test_one_row_errors(self):
        h = tiny_handle(n=1)
        with pytest.raises(DataError, match="degenerate"):
            make_split(h, 0.5, 1)

    def test_round_half_up(self):
        assert train_size(5, 0.5) == 3   # 2.5 rounds up
        assert train_size(3, 0.5) == 2   # 1.5 rounds up
        assert train_size(100, 0.8) == 80

    def test_deterministic(self):
        h = tiny_handle(n=40)
        a = make_split(h, 0.8, 7)
        b = make_split(h, 0.8, 7)
        assert np.array_equal(a.train_indices, b.train_indices)
        c = make_split(h, 0.8, 8)
        assert not np.array_equal(a.train_indices, c.train_indices)

    def test_split_of_subset_partitions_subset(self):
        h = tiny_handle(n=60)
        v = make_subset(h, 0.5, 3)
        s = make_split(v, 0.8, 4)
        combined = np.sort(np.concatenate([s.train_indices, s.val_indices]))
        assert np.array_equal(combined, v.indices)

    @given(
        st.integers(min_value=2, max_value=300),
        st.floats(min_value=0.05, max_value=0.95),
        st.integers(min_value=0, max_value=2**32),
    )
    @settings(max_examples=100)
    def test_partition_property(self, n, f, seed):
        h = tiny_handle(n=n)
        try:
            s = make_split(h, f, seed)
        except DataError:
            k = train_size(n, f)
            assert k < 1 or k >= n  # only degenerate cases may fail
            return
        train, val = set(s.train_indices.tolist()), set(s.val_indices.tolist())
        assert not (train & val)
        assert train | val == set(range(n))
        assert len(train) == train_size(n, f)


class TestStandardizer:
    def test_analytic_column(self):
        std = Standardizer.fit(np.array([[1.0], [2.0], [3.0]]), ["c"])
        assert std.mean[0] == pytest.approx(2.0)
        assert std.std[0] == pytest.approx(math.sqrt(2.0 / 3.0))  # population
        z = std.transform(np.array([[1.0], [2.0], [3.0]]))
        assert abs(z.mean()) < 1e-10

    def test_fitted_view_is_normalized(self):
        rng = np.random.default_rng(5)
        x = rng.normal(3.0, 2.5, size=(500, 4))
        std = Standardizer.fit(x)
        z = std.transform(x)
        assert np.all(np.abs(z.mean(axis=0)) < 1e-10)
        assert np.all(np.abs(z.std(axis=0) - 1.0) < 1e-10)

    def test_constant_column_named(self):
        x = np.column_stack([np.arange(5.0), np.full(5, 7.0)])
        with pytest.raises(DataError, match="kappa_1"):
            Standardizer.fit(x, ["wbar", "kappa_1"])

    def test_holdout_uses_train_stats(self):
        rng = np.random.default_rng(6)
        train = rng.normal(0.0, 1.0, size=(100, 2))
        val = rng.normal(5.0, 1.0, size=(50, 2))
        std = Standardizer.fit(train)
        z = std.transform(val)
        assert abs(z.mean()) > 1.0  # validation mean is far from 0

    def test_inverse_round_trip(self):
        rng = np.random.default_rng(7)
        x = rng.normal(10.0, 3.0, size=(60, 5))
        std = Standardizer.fit(x)
        back = std.inverse_transform(std.transform(x))
        np.testing.assert_allclose(back, x, rtol=1e-12)

    def test_json_round_trip(self):
        std = Standardizer.fit(np.random.default_rng(8).normal(size=(10, 3)))
        back = Standardizer.from_json(std.to_json())
        np.testing.assert_array_equal(back.mean, std.mean)
        np.testing.assert_array_equal(back.std, std.std)


class TestSyntheticActivation:
    def test_schema(self):
        h = generate_synthetic_activation(100, 1)
        assert h.feature_names == INPUT_COLUMNS
        assert h.target_names == TARGET_COLUMNS
        assert h.features.shape == (100, 16)
        assert h.targets.shape == (100, 4)

    def test_outputs_in_unit_interval(self):
        for seed in (0, 1, 99):
            h = generate_synthetic_activation(500, seed)
            assert np.all(h.targets > 0.0) and np.all(h.targets < 1.0)

    def test_input_ranges(self):
        h = generate_synthetic_activation(2000, 11)
        f = {name: h.features[:, i] for i, name in enumerate(INPUT_COLUMNS)}
        assert f["Tair"].min() >= 230 and f["Tair"].max() <= 310
        assert f["Pressure"].min() >= 100 and f["Pressure"].max() <= 1050
        assert f["rh"].min() >= 0.5 and f["rh"].max() <= 1.02
        assert f["wbar"].min() >= 1.0 and f["wbar"].max() <= 500.0
        for m in range(1, 5):
            assert f[f"num_aer_{m}"].min() >= 10 and f[f"num_aer_{m}"].max() <= 1e4
            assert f[f"r_aer_{m}"].min() >= 0.01 and f[f"r_aer_{m}"].max() <= 1.0
            assert f[f"kappa_{m}"].min() >= 0.001 and f[f"kappa_{m}"].max() <= 1.2

    def test_bit_identical_regeneration(self):
        a = generate_synthetic_activation(1000, 7)
        b = generate_synthetic_activation(1000, 7)
        assert np.array_equal(a.features, b.features)
        assert np.array_equal(a.targets, b.targets)

    def test_more_particles_lower_activated_fraction(self):
        # Mid-range row; sweep num_aer_1 upward and expect fn_1 to fall.
        base = {
            "Tair": 270.0, "Pressure": 575.0, "rh": 0.76, "wbar": math.sqrt(500.0),
        }
        for m in range(1, 5):
            base[f"num_aer_{m}"] = math.sqrt(10 * 1e4)
            base[f"r_aer_{m}"] = 0.1
            base[f"kappa_{m}"] = 0.6
        sweep = np.linspace(10, 1e4, 25)
        rows = []
        for v in sweep:
            row = dict(base)
            row["num_aer_1"] = v
            rows.append([row[c] for c in INPUT_COLUMNS])
        fn = compute_activation_targets(np.asarray(rows))
        assert np.all(np.diff(fn[:, 0]) < 0)
        assert np.allclose(fn[:, 1], fn[0, 1])  # other modes untouched
