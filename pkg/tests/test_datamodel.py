import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from freda.datamodel import (
    AgeTransformParams,
    Dataset,
    FeatureStats,
    SyntheticConfig,
    age_transform,
    age_transform_inverse,
    gen_synthetic,
    local_stats,
    merge_stats,
    partition_uniform,
    read_dataset_csv,
    shifted_feature_indices,
    standardize,
    standardize_columns,
    write_dataset_csv,
)
from freda.errors import ZeroVarianceError


# ---------------------------------------------------------------------------
# Dataset
# ---------------------------------------------------------------------------


def test_dataset_row_alignment_checked():
    with pytest.raises(ValueError):
        Dataset(features=np.zeros((3, 2)), domain_ids=np.zeros(2, dtype=int))
    with pytest.raises(ValueError):
        Dataset(features=np.zeros((3, 2)), domain_ids=np.zeros(3, dtype=int),
                labels=np.zeros(4))


def test_dataset_requires_two_features():
    with pytest.raises(ValueError):
        Dataset(features=np.zeros((3, 1)), domain_ids=np.zeros(3, dtype=int))


def test_dataset_domain_ids_contiguous_from_zero():
    Dataset(features=np.zeros((4, 2)), domain_ids=np.array([1, 0, 1, 0]))
    with pytest.raises(ValueError):
        Dataset(features=np.zeros((4, 2)), domain_ids=np.array([0, 2, 0, 2]))
    with pytest.raises(ValueError):
        Dataset(features=np.zeros((2, 2)), domain_ids=np.array([1, 1]))


# ---------------------------------------------------------------------------
# Age transform
# ---------------------------------------------------------------------------


def test_age_transform_reference_points():
    assert age_transform(20.0) == pytest.approx(0.0, abs=1e-12)
    assert age_transform(41.0) == pytest.approx(1.0, abs=1e-12)
    assert age_transform(0.0) == pytest.approx(-math.log(21.0), abs=1e-10)


def test_age_transform_inverse_reference_points():
    assert age_transform_inverse(0.0) == pytest.approx(20.0, abs=1e-12)
    assert age_transform_inverse(1.0) == pytest.approx(41.0, abs=1e-12)
    assert age_transform_inverse(-math.log(21.0)) == pytest.approx(0.0, abs=1e-10)


def test_age_transform_round_trip_and_monotone():
    ages = np.linspace(0.0, 120.0, 601)
    z = age_transform(ages)
    assert np.all(np.diff(z) > 0)  # strictly increasing
    back = age_transform_inverse(z)
    assert np.max(np.abs(back - ages)) <= 1e-10


def test_age_transform_continuous_at_threshold():
    params = AgeTransformParams(y_adult=20.0)
    eps = 1e-9
    below = age_transform(20.0 - eps, params)
    above = age_transform(20.0 + eps, params)
    assert abs(above - below) < 1e-8


@given(st.floats(min_value=0.0, max_value=120.0))
def test_age_transform_round_trip_property(age):
    assert age_transform_inverse(age_transform(age)) == pytest.approx(age, abs=1e-10)


# ---------------------------------------------------------------------------
# Feature statistics
# ---------------------------------------------------------------------------


def test_local_stats_hand_example():
    stats = local_stats(np.array([[1.0], [3.0]]))
    assert stats.count == 2
    assert stats.sum.tolist() == [4.0]
    assert stats.sum_sq.tolist() == [10.0]


def test_local_stats_zero_matrix():
    stats = local_stats(np.zeros((4, 3)))
    assert np.all(stats.sum == 0.0) and np.all(stats.sum_sq == 0.0)


def test_local_stats_matches_direct_reduction():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(5, 3))
    stats = local_stats(x)
    for j in range(3):
        assert stats.sum[j] == pytest.approx(sum(x[i, j] for i in range(5)))
        assert stats.sum_sq[j] == pytest.approx(sum(x[i, j] ** 2 for i in range(5)))


def test_local_stats_rejects_empty():
    with pytest.raises(ValueError):
        local_stats(np.zeros((0, 3)))


def test_merge_stats_identical_standardized_shards():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(10, 2))
    x = (x - x.mean(axis=0)) / x.std(axis=0)
    merged = merge_stats([local_stats(x), local_stats(x)])
    assert merged.count == 20
    assert np.allclose(merged.mean(), 0.0, atol=1e-12)
    assert np.allclose(merged.variance(), 1.0, atol=1e-12)


def test_merge_stats_empty_identity():
    stats = local_stats(np.arange(6.0).reshape(3, 2))
    empty = FeatureStats(count=0, sum=np.zeros(2), sum_sq=np.zeros(2))
    merged = merge_stats([stats, empty])
    assert merged.count == stats.count
    assert np.array_equal(merged.sum, stats.sum)
    assert np.array_equal(merged.sum_sq, stats.sum_sq)


def test_merge_stats_equals_concatenation_oracle():
    rng = np.random.default_rng(23)
    parts = [rng.normal(size=(n, 4)) * 3.0 for n in (7, 1, 12)]
    merged = merge_stats([local_stats(p) for p in parts])
    pooled = local_stats(np.vstack(parts))
    assert merged.count == pooled.count
    np.testing.assert_allclose(merged.sum, pooled.sum, rtol=1e-9)
    np.testing.assert_allclose(merged.sum_sq, pooled.sum_sq, rtol=1e-9)


def test_merge_stats_rejects_width_mismatch():
    a = local_stats(np.zeros((2, 2)))
    b = local_stats(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        merge_stats([a, b])


@given(st.integers(min_value=1, max_value=20), st.integers(min_value=1, max_value=20),
       st.integers(min_value=0, max_value=2**31))
@settings(max_examples=30, deadline=None)
def test_merge_stats_associative_commutative(n1, n2, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(n1, 3)), rng.normal(size=(n2, 3))
    ab = merge_stats([local_stats(a), local_stats(b)])
    ba = merge_stats([local_stats(b), local_stats(a)])
    assert ab.count == ba.count
    np.testing.assert_allclose(ab.sum, ba.sum, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(ab.sum_sq, ba.sum_sq, rtol=1e-12, atol=1e-12)


# ---------------------------------------------------------------------------
# Standardization
# ---------------------------------------------------------------------------


def test_standardize_moments():
    rng = np.random.default_rng(3)
    x = rng.normal(loc=5.0, scale=2.5, size=(40, 6))
    z = standardize_columns(x, local_stats(x))
    assert np.max(np.abs(z.mean(axis=0))) <= 1e-8
    assert np.max(np.abs(z.var(axis=0) - 1.0)) <= 1e-8


def test_standardize_idempotent_on_standardized_data():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(30, 3))
    z = standardize_columns(x, local_stats(x))
    z2 = standardize_columns(z, local_stats(z))
    assert np.max(np.abs(z2 - z)) <= 1e-10


def test_standardize_constant_column_reports_index():
    x = np.ones((5, 3))
    x[:, 0] = np.arange(5.0)
    x[:, 2] = np.arange(5.0)
    with pytest.raises(ZeroVarianceError) as exc:
        standardize_columns(x, local_stats(x))
    assert exc.value.columns == [1]


def test_standardize_dataset_keeps_labels_and_domains():
    ds = Dataset(
        features=np.arange(8.0).reshape(4, 2),
        domain_ids=np.array([0, 0, 1, 1]),
        labels=np.array([1.0, 2.0, 3.0, 4.0]),
    )
    out = standardize(ds, local_stats(ds.features))
    assert np.array_equal(out.domain_ids, ds.domain_ids)
    assert np.array_equal(out.labels, ds.labels)
    assert np.max(np.abs(out.features.mean(axis=0))) <= 1e-8


# ---------------------------------------------------------------------------
# Partitioning
# ---------------------------------------------------------------------------


def _flat_dataset(n):
    return Dataset(features=np.arange(2.0 * n).reshape(n, 2),
                   domain_ids=np.zeros(n, dtype=int))


def test_partition_two_clients_paper_sizes():
    shards = partition_uniform(_flat_dataset(1866), 2, seed=0)
    assert sorted(s.n_samples for s in shards) == [933, 933]


def test_partition_single_client_identity():
    ds = _flat_dataset(17)
    (shard,) = partition_uniform(ds, 1, seed=9)
    assert np.array_equal(np.sort(shard.features, axis=0), np.sort(ds.features, axis=0))
    assert shard.n_samples == 17


def test_partition_ten_rows_four_clients():
    ds = _flat_dataset(10)
    shards = partition_uniform(ds, 4, seed=1)
    assert sorted(s.n_samples for s in shards) == [2, 2, 3, 3]
    # multiset union equals input rows
    pooled = np.vstack([s.features for s in shards])
    assert np.array_equal(
        np.sort(pooled.view("f8,f8").ravel()),
        np.sort(ds.features.view("f8,f8").ravel()),
    )


def test_partition_deterministic_in_seed():
    ds = _flat_dataset(25)
    a = partition_uniform(ds, 3, seed=42)
    b = partition_uniform(ds, 3, seed=42)
    c = partition_uniform(ds, 3, seed=43)
    for s, t in zip(a, b):
        assert np.array_equal(s.features, t.features)
    assert any(not np.array_equal(s.features, t.features) for s, t in zip(a, c))


def test_partition_rejects_bad_client_count():
    with pytest.raises(ValueError):
        partition_uniform(_flat_dataset(5), 0, seed=0)


@given(st.integers(min_value=1, max_value=40), st.integers(min_value=1, max_value=8),
       st.integers(min_value=0, max_value=2**31))
@settings(max_examples=40, deadline=None)
def test_partition_sizes_and_union_property(n, k, seed):
    if k > n:
        return
    ds = _flat_dataset(n)
    shards = partition_uniform(ds, k, seed)
    sizes = [s.n_samples for s in shards]
    assert sum(sizes) == n
    assert max(sizes) - min(sizes) <= 1


# ---------------------------------------------------------------------------
# Synthetic generator
# ---------------------------------------------------------------------------


def test_gen_synthetic_shapes_and_similarities():
    cfg = SyntheticConfig(n_source_total=60, n_target=40, n_features=12,
                          n_clients=3, n_target_domains=2, shift_strength=(0.5, 0.0),
                          seed=7)
    shards, target, sims = gen_synthetic(cfg)
    assert len(shards) == 3
    assert sum(s.n_samples for s in shards) == 60
    assert target.n_samples == 40
    assert target.n_features == 12
    assert np.allclose(sims, [0.5, 1.0])
    assert set(np.unique(target.domain_ids)) == {0, 1}


def test_gen_synthetic_deterministic():
    cfg = SyntheticConfig(n_source_total=40, n_target=20, n_features=8,
                          support_size=4, n_target_domains=1, shift_strength=(0.3,),
                          seed=99)
    a = gen_synthetic(cfg)
    b = gen_synthetic(cfg)
    for s, t in zip(a[0], b[0]):
        assert np.array_equal(s.features, t.features)
        assert np.array_equal(s.labels, t.labels)
    assert np.array_equal(a[1].features, b[1].features)
    assert np.array_equal(a[1].labels, b[1].labels)
    assert np.array_equal(a[2], b[2])


def test_gen_synthetic_unshifted_domain_matches_source_distribution():
    """shift 0 leaves the dependency structure intact: a regressor fit on
    pooled sources predicts the unshifted target domain about as well as
    held-out source data."""
    cfg = SyntheticConfig(n_source_total=400, n_target=200, n_features=10,
                          n_clients=1, n_target_domains=1, shift_strength=(0.0,),
                          noise_sd=0.1, support_size=4, seed=21)
    (source,), target, _ = gen_synthetic(cfg)
    half = 200
    coef, *_ = np.linalg.lstsq(source.features[:half], source.labels[:half], rcond=None)
    mae_src = np.mean(np.abs(source.features[half:] @ coef - source.labels[half:]))
    mae_tgt = np.mean(np.abs(target.features @ coef - target.labels))
    assert mae_tgt <= 1.5 * mae_src + 0.5


def test_gen_synthetic_full_shift_decorrelates_columns():
    """shift 1 replaces the marked columns with draws that the source
    dependency model cannot predict."""
    cfg = SyntheticConfig(n_source_total=300, n_target=300, n_features=10,
                          n_clients=1, n_target_domains=1, shift_strength=(1.0,),
                          seed=13)
    (source,), target, _ = gen_synthetic(cfg)
    shifted = shifted_feature_indices(cfg)
    assert shifted.size > 0
    rest = np.setdiff1d(np.arange(cfg.n_features), shifted)
    for f in shifted:
        others = np.delete(np.arange(cfg.n_features), f)
        coef, *_ = np.linalg.lstsq(source.features[:, others], source.features[:, f],
                                   rcond=None)
        pred = target.features[:, others] @ coef
        corr = np.corrcoef(pred, target.features[:, f])[0, 1]
        assert abs(corr) <= 0.2
    # and the shifted subset never overlaps the untouched features
    assert np.intersect1d(shifted, rest).size == 0


def test_shifted_feature_indices_stable_and_disjoint():
    cfg = SyntheticConfig(seed=5)
    idx = shifted_feature_indices(cfg)
    assert np.array_equal(idx, shifted_feature_indices(cfg))
    assert np.unique(idx).size == idx.size
    assert idx.size < cfg.n_features


def test_gen_synthetic_rejects_bad_config():
    with pytest.raises(ValueError):
        SyntheticConfig(shift_strength=(0.5, 1.2), n_target_domains=2)
    with pytest.raises(ValueError):
        SyntheticConfig(support_size=0)
    with pytest.raises(ValueError):
        SyntheticConfig(n_clients=0)


def test_gen_synthetic_ages_non_negative():
    cfg = SyntheticConfig(n_source_total=120, n_target=60, seed=3)
    shards, target, _ = gen_synthetic(cfg)
    for part in [*shards, target]:
        assert np.all(part.labels >= 0.0)
        assert np.all(np.isfinite(part.labels))


# ---------------------------------------------------------------------------
# CSV round-trip
# ---------------------------------------------------------------------------


def test_csv_round_trip_exact(tmp_path):
    rng = np.random.default_rng(2)
    ds = Dataset(
        features=rng.normal(size=(9, 4)) * 1e3,
        domain_ids=np.array([0, 1, 0, 1, 2, 2, 0, 1, 2]),
        labels=rng.uniform(0.0, 100.0, size=9),
    )
    path = tmp_path / "data.csv"
    write_dataset_csv(ds, path)
    back = read_dataset_csv(path)
    assert np.array_equal(back.features, ds.features)  # repr() writes are exact
    assert np.array_equal(back.labels, ds.labels)
    assert np.array_equal(back.domain_ids, ds.domain_ids)
    assert back.feature_names == ds.feature_names


def test_csv_without_labels(tmp_path):
    ds = Dataset(features=np.arange(6.0).reshape(3, 2), domain_ids=np.zeros(3, dtype=int))
    path = tmp_path / "plain.csv"
    write_dataset_csv(ds, path)
    back = read_dataset_csv(path)
    assert back.labels is None
    assert np.array_equal(back.features, ds.features)


def test_csv_header_shape(tmp_path):
    ds = Dataset(features=np.zeros((2, 2)), domain_ids=np.zeros(2, dtype=int),
                 labels=np.array([1.0, 2.0]), feature_names=("alpha", "beta"))
    path = tmp_path / "named.csv"
    write_dataset_csv(ds, path)
    header = path.read_text().splitlines()[0]
    assert header == "domain_id,label,alpha,beta"
