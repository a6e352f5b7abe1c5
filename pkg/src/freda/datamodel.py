"""Datasets, label transforms, mergeable column statistics, partitioning,
and the synthetic domain-shift generator.

A :class:`Dataset` is the unit that moves between parties: a feature
matrix with optional labels and a per-sample domain tag.  Column
statistics are kept as (count, sum, sum of squares) triples so shards
can be reduced without pooling rows, which is what makes federated
standardization possible.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ZeroVarianceError
from .seeds import derive_rng

logger = logging.getLogger(__name__)

__all__ = [
    "Dataset",
    "AgeTransformParams",
    "FeatureStats",
    "SyntheticConfig",
    "age_transform",
    "age_transform_inverse",
    "local_stats",
    "merge_stats",
    "standardize",
    "standardize_columns",
    "drop_columns",
    "partition_uniform",
    "gen_synthetic",
    "read_dataset_csv",
    "write_dataset_csv",
]

VARIANCE_TOL = 1e-12


# ---------------------------------------------------------------------------
# Core types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Dataset:
    """Feature matrix with optional labels and per-sample domain tags.

    Rows of ``features``, ``labels`` (when present) and ``domain_ids``
    are aligned.  Values are treated as immutable after construction.
    """

    features: np.ndarray
    domain_ids: np.ndarray
    labels: Optional[np.ndarray] = None
    feature_names: tuple = ()

    def __post_init__(self):
        features = np.ascontiguousarray(self.features, dtype=np.float64)
        if features.ndim != 2:
            raise ValueError(f"features must be 2-d, got ndim={features.ndim}")
        if features.shape[1] < 2:
            raise ValueError("need at least 2 feature columns")
        domain_ids = np.ascontiguousarray(self.domain_ids, dtype=np.int64)
        if domain_ids.shape != (features.shape[0],):
            raise ValueError("domain_ids length does not match feature rows")
        if domain_ids.size:
            uniq = np.unique(domain_ids)
            # downstream per-domain loops index 0..L-1 directly
            if uniq[0] != 0 or uniq[-1] != uniq.size - 1:
                raise ValueError("domain ids must cover a contiguous range 0..L-1")
        labels = self.labels
        if labels is not None:
            labels = np.ascontiguousarray(labels, dtype=np.float64)
            if labels.shape != (features.shape[0],):
                raise ValueError("labels length does not match feature rows")
        names = tuple(self.feature_names)
        if not names:
            names = tuple(f"f{j}" for j in range(features.shape[1]))
        if len(names) != features.shape[1]:
            raise ValueError("feature_names length does not match columns")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "domain_ids", domain_ids)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "feature_names", names)

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def n_domains(self) -> int:
        return int(self.domain_ids.max()) + 1 if self.domain_ids.size else 0

    def domain_mask(self, domain_id: int) -> np.ndarray:
        return self.domain_ids == domain_id

    def take(self, idx: np.ndarray) -> "Dataset":
        """Row subset as a new dataset."""
        return Dataset(
            features=self.features[idx],
            domain_ids=self.domain_ids[idx],
            labels=None if self.labels is None else self.labels[idx],
            feature_names=self.feature_names,
        )


@dataclass(frozen=True)
class AgeTransformParams:
    """Adult-age threshold for the piecewise log/linear label transform."""

    y_adult: float = 20.0

    def __post_init__(self):
        if not self.y_adult > 0:
            raise ValueError("y_adult must be positive")


@dataclass(frozen=True)
class FeatureStats:
    """Mergeable per-column first and second moments.

    Holds exact column sums, so shard statistics can be combined by
    addition and the pooled mean/variance recovered afterwards.
    Variance is the population variance (divide by n), which keeps
    merging exact.
    """

    count: int
    sum: np.ndarray
    sum_sq: np.ndarray

    def __post_init__(self):
        s = np.ascontiguousarray(self.sum, dtype=np.float64)
        sq = np.ascontiguousarray(self.sum_sq, dtype=np.float64)
        if s.ndim != 1 or sq.shape != s.shape:
            raise ValueError("sum and sum_sq must be 1-d and the same length")
        if self.count < 0:
            raise ValueError("count must be non-negative")
        object.__setattr__(self, "count", int(self.count))
        object.__setattr__(self, "sum", s)
        object.__setattr__(self, "sum_sq", sq)

    @property
    def width(self) -> int:
        return self.sum.shape[0]

    def mean(self) -> np.ndarray:
        if self.count == 0:
            raise ValueError("no samples")
        return self.sum / self.count

    def variance(self) -> np.ndarray:
        m = self.mean()
        var = self.sum_sq / self.count - m * m
        # exact-arithmetic variance is >= 0; clamp rounding noise
        return np.maximum(var, 0.0)

    def sd(self) -> np.ndarray:
        return np.sqrt(self.variance())

    @staticmethod
    def empty(width: int) -> "FeatureStats":
        return FeatureStats(0, np.zeros(width), np.zeros(width))

    def pack(self) -> np.ndarray:
        """Flatten to [count, sum..., sum_sq...] for transport."""
        return np.concatenate([[float(self.count)], self.sum, self.sum_sq])

    @staticmethod
    def unpack(vec: np.ndarray) -> "FeatureStats":
        vec = np.asarray(vec, dtype=np.float64)
        width = (vec.shape[0] - 1) // 2
        return FeatureStats(int(round(vec[0])), vec[1 : 1 + width], vec[1 + width :])


# ---------------------------------------------------------------------------
# Label transform
# ---------------------------------------------------------------------------


def age_transform(y, params: AgeTransformParams = AgeTransformParams()):
    """Piecewise log/linear transform of an age in years.

    Logarithmic below the adult threshold, linear above, continuous and
    strictly increasing.  Accepts scalars or arrays.
    """
    y_arr = np.asarray(y, dtype=np.float64)
    if np.any(y_arr < 0):
        raise ValueError("ages must be non-negative")
    a = params.y_adult
    out = np.where(
        y_arr <= a,
        np.log1p(y_arr) - np.log1p(a),
        (y_arr - a) / (a + 1.0),
    )
    return float(out) if np.isscalar(y) else out


def age_transform_inverse(z, params: AgeTransformParams = AgeTransformParams()):
    """Inverse of :func:`age_transform`."""
    z_arr = np.asarray(z, dtype=np.float64)
    a = params.y_adult
    out = np.where(
        z_arr <= 0,
        np.expm1(z_arr + np.log1p(a)),
        a + z_arr * (a + 1.0),
    )
    return float(out) if np.isscalar(z) else out


# ---------------------------------------------------------------------------
# Column statistics
# ---------------------------------------------------------------------------


def local_stats(features: np.ndarray) -> FeatureStats:
    """Exact column sums and sums of squares of one shard."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] < 1:
        raise ValueError("empty matrix")
    return FeatureStats(x.shape[0], x.sum(axis=0), (x * x).sum(axis=0))


def merge_stats(parts: Sequence[FeatureStats]) -> FeatureStats:
    """Combine shard statistics; associative and commutative."""
    parts = list(parts)
    if not parts:
        raise ValueError("nothing to merge")
    width = parts[0].width
    for p in parts[1:]:
        if p.width != width:
            raise ValueError(f"stats width mismatch: {p.width} != {width}")
    return FeatureStats(
        count=sum(p.count for p in parts),
        sum=np.sum([p.sum for p in parts], axis=0),
        sum_sq=np.sum([p.sum_sq for p in parts], axis=0),
    )


def standardize_columns(x: np.ndarray, stats: FeatureStats) -> np.ndarray:
    """(x - mean) / sd per column, using pooled ``stats``."""
    x = np.asarray(x, dtype=np.float64)
    var = stats.variance()
    bad = np.flatnonzero(var <= VARIANCE_TOL)
    if bad.size:
        raise ZeroVarianceError(bad.tolist())
    return (x - stats.mean()) / np.sqrt(var)


def standardize(dataset: Dataset, stats: FeatureStats) -> Dataset:
    """Standardize feature columns with pooled statistics.

    Raises :class:`ZeroVarianceError` naming the offending columns if
    any pooled variance is (numerically) zero; such columns are dropped
    before the protocol by the caller.
    """
    if stats.width != dataset.n_features:
        raise ValueError("stats width does not match dataset columns")
    return Dataset(
        features=standardize_columns(dataset.features, stats),
        domain_ids=dataset.domain_ids,
        labels=dataset.labels,
        feature_names=dataset.feature_names,
    )


def drop_columns(dataset: Dataset, columns: Sequence[int]) -> Dataset:
    """Remove feature columns by index (used for zero-variance drops)."""
    cols = sorted(set(int(c) for c in columns))
    if not cols:
        return dataset
    keep = [j for j in range(dataset.n_features) if j not in cols]
    logger.warning("dropping %d zero-variance column(s): %s", len(cols), cols)
    return Dataset(
        features=dataset.features[:, keep],
        domain_ids=dataset.domain_ids,
        labels=dataset.labels,
        feature_names=tuple(dataset.feature_names[j] for j in keep),
    )


# ---------------------------------------------------------------------------
# Partitioning
# ---------------------------------------------------------------------------


def partition_uniform(dataset: Dataset, n_clients: int, seed: int) -> list[Dataset]:
    """Split rows uniformly at random into near-equal shards.

    Shards are disjoint, their union is the input, sizes differ by at
    most one, and the permutation is a deterministic function of
    ``seed``.  Domain tags are ignored when splitting.
    """
    if n_clients <= 0:
        raise ValueError("n_clients must be positive")
    n = dataset.n_samples
    if n < n_clients:
        raise ValueError(f"cannot split {n} rows into {n_clients} shards")
    perm = derive_rng(seed, "partition").permutation(n)
    base, extra = divmod(n, n_clients)
    shards, start = [], 0
    for i in range(n_clients):
        size = base + (1 if i < extra else 0)
        shards.append(dataset.take(np.sort(perm[start : start + size])))
        start += size
    return shards


# ---------------------------------------------------------------------------
# Synthetic domain-shift data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticConfig:
    """Shape and shift parameters of a generated benchmark instance.

    Source features share a low-rank latent structure; each target
    domain replaces a fixed subset of feature columns with partially
    decorrelated draws, breaking the dependency structure that the
    feature models learn.  ``shift_strength[d]`` in [0, 1] controls how
    completely domain ``d``'s shifted columns are decorrelated, and the
    reported domain similarity is ``1 - shift_strength[d]``.
    """

    n_source_total: int = 200
    n_target: int = 240
    n_features: int = 30
    n_clients: int = 2
    n_target_domains: int = 4
    shift_strength: tuple = (0.8, 0.0, 0.9, 0.1)
    noise_sd: float = 0.1
    support_size: int = 10
    seed: int = 0
    latent_rank: int = 6
    feature_noise_sd: float = 0.6
    shifted_fraction: float = 0.4

    def __post_init__(self):
        if self.n_clients < 1:
            raise ValueError("n_clients must be >= 1")
        if self.n_features < 2:
            raise ValueError("need at least 2 features")
        if not 0 < self.support_size <= self.n_features:
            raise ValueError("support_size must be in 1..n_features")
        if len(self.shift_strength) != self.n_target_domains:
            raise ValueError("shift_strength needs one entry per target domain")
        if any(not 0.0 <= s <= 1.0 for s in self.shift_strength):
            raise ValueError("shift_strength entries must lie in [0, 1]")
        if self.n_target < self.n_target_domains:
            raise ValueError("need at least one target sample per domain")
        if not 1 <= self.latent_rank <= self.n_features:
            raise ValueError("latent_rank must be in 1..n_features")
        if not 0.0 < self.shifted_fraction < 1.0:
            raise ValueError("shifted_fraction must be in (0, 1)")
        object.__setattr__(self, "shift_strength", tuple(float(s) for s in self.shift_strength))


def _latent_features(rng: np.random.Generator, n: int, cfg: SyntheticConfig):
    """Correlated features: low-rank latent mix plus diagonal noise."""
    z = rng.standard_normal((n, cfg.latent_rank))
    return z


def _ages_from_signal(signal: np.ndarray) -> np.ndarray:
    """Map an unbounded linear signal to valid ages via the inverse label
    transform; signals below the age-0 image are clamped (rare)."""
    floor = age_transform(0.0) + 1e-9
    return age_transform_inverse(np.maximum(signal, floor))


def gen_synthetic(config: SyntheticConfig):
    """Generate source shards, a shifted target set, and domain similarities.

    Returns ``(source_shards, target, similarities)``.  Labels follow a
    sparse linear model on the clean features (then mapped to the age
    scale); observed target columns in the shifted subset are mixed
    with independent draws, so their relationship with both the label
    and the remaining features degrades with the shift strength.
    Deterministic given ``config.seed``.
    """
    cfg = config
    P, r = cfg.n_features, cfg.latent_rank
    rng = derive_rng(cfg.seed, "synthetic")

    mixing = rng.standard_normal((P, r)) / np.sqrt(r)
    beta = np.zeros(P)
    support = rng.choice(P, size=cfg.support_size, replace=False)
    signs = rng.choice([-1.0, 1.0], size=cfg.support_size)
    beta[support] = signs * rng.uniform(0.8, 1.2, size=cfg.support_size)

    n_shift = max(1, int(round(cfg.shifted_fraction * P)))
    # force overlap with the support so a non-adaptive model is hurt
    shifted = np.concatenate(
        [
            support[: max(1, n_shift // 2)],
            np.setdiff1d(rng.permutation(P), support)[: n_shift - max(1, n_shift // 2)],
        ]
    )
    shifted = np.unique(shifted)

    def make_clean(n, stream):
        sub = derive_rng(cfg.seed, "synthetic", stream)
        z = _latent_features(sub, n, cfg)
        x = z @ mixing.T + cfg.feature_noise_sd * sub.standard_normal((n, P))
        return x

    def make_labels(x_clean, stream):
        sub = derive_rng(cfg.seed, "synthetic", "labels", stream)
        signal = x_clean @ beta
        scale = np.sqrt(beta @ (mixing @ mixing.T + cfg.feature_noise_sd**2 * np.eye(P)) @ beta)
        signal = signal / max(scale, 1e-12)
        signal = signal + cfg.noise_sd * sub.standard_normal(x_clean.shape[0])
        return _ages_from_signal(signal)

    x_source = make_clean(cfg.n_source_total, "source")
    y_source = make_labels(x_source, "source")
    source = Dataset(
        features=x_source,
        domain_ids=np.zeros(cfg.n_source_total, dtype=np.int64),
        labels=y_source,
    )
    shards = partition_uniform(source, cfg.n_clients, derive_rng(cfg.seed, "synthetic", "split").integers(2**63))

    # target domains: equal sample split, per-domain decorrelation strength
    base, extra = divmod(cfg.n_target, cfg.n_target_domains)
    feats, doms, labels = [], [], []
    for d in range(cfg.n_target_domains):
        n_d = base + (1 if d < extra else 0)
        x_clean = make_clean(n_d, f"target{d}")
        y_d = make_labels(x_clean, f"target{d}")
        s = cfg.shift_strength[d]
        x_obs = x_clean.copy()
        if s > 0:
            sub = derive_rng(cfg.seed, "synthetic", "shift", d)
            col_sd = np.sqrt(np.diag(mixing @ mixing.T) + cfg.feature_noise_sd**2)
            fresh = sub.standard_normal((n_d, shifted.size)) * col_sd[shifted]
            x_obs[:, shifted] = np.sqrt(1.0 - s * s) * x_clean[:, shifted] + s * fresh
        feats.append(x_obs)
        doms.append(np.full(n_d, d, dtype=np.int64))
        labels.append(y_d)

    target = Dataset(
        features=np.concatenate(feats, axis=0),
        domain_ids=np.concatenate(doms),
        labels=np.concatenate(labels),
    )
    similarities = np.array([1.0 - s for s in cfg.shift_strength])
    return shards, target, similarities


def shifted_feature_indices(config: SyntheticConfig) -> np.ndarray:
    """Recompute the shifted column subset of a generated instance."""
    cfg = config
    rng = derive_rng(cfg.seed, "synthetic")
    rng.standard_normal((cfg.n_features, cfg.latent_rank))  # mixing draw
    beta_support = rng.choice(cfg.n_features, size=cfg.support_size, replace=False)
    rng.choice([-1.0, 1.0], size=cfg.support_size)
    rng.uniform(0.8, 1.2, size=cfg.support_size)
    n_shift = max(1, int(round(cfg.shifted_fraction * cfg.n_features)))
    shifted = np.concatenate(
        [
            beta_support[: max(1, n_shift // 2)],
            np.setdiff1d(rng.permutation(cfg.n_features), beta_support)[
                : n_shift - max(1, n_shift // 2)
            ],
        ]
    )
    return np.unique(shifted)


# ---------------------------------------------------------------------------
# CSV interchange
# ---------------------------------------------------------------------------


def write_dataset_csv(dataset: Dataset, path) -> None:
    """Write ``domain_id[,label],feature...`` rows with a header line."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        header = ["domain_id"]
        if dataset.labels is not None:
            header.append("label")
        header.extend(dataset.feature_names)
        w.writerow(header)
        for i in range(dataset.n_samples):
            row = [int(dataset.domain_ids[i])]
            if dataset.labels is not None:
                row.append(repr(float(dataset.labels[i])))
            row.extend(repr(float(v)) for v in dataset.features[i])
            w.writerow(row)


def read_dataset_csv(path) -> Dataset:
    """Inverse of :func:`write_dataset_csv`."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or header[0] != "domain_id":
            raise ValueError(f"{path}: first column must be domain_id")
        has_label = len(header) > 1 and header[1] == "label"
        first_feat = 2 if has_label else 1
        names = tuple(header[first_feat:])
        doms, labels, feats = [], [], []
        for row in reader:
            if not row:
                continue
            doms.append(int(row[0]))
            if has_label:
                labels.append(float(row[1]))
            feats.append([float(v) for v in row[first_feat:]])
    return Dataset(
        features=np.asarray(feats, dtype=np.float64),
        domain_ids=np.asarray(doms, dtype=np.int64),
        labels=np.asarray(labels) if has_label else None,
        feature_names=names,
    )
