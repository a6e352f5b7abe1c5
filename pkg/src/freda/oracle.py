"""Centralized pooled-plaintext pipeline with no federation or masking.

Runs the same four stages as the protocol on pooled data: per-feature
Gaussian-process models, confidence weights, penalty selection on the
label-available domains, and final weighted elastic-net models, with
coordinate descent in place of federated subgradient training.  Serves
as the independent reference the protocol is tested against, and as a
standalone command producing the same results schema.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import wen
from .datamodel import (
    AgeTransformParams,
    age_transform,
    age_transform_inverse,
    local_stats,
    merge_stats,
    standardize_columns,
)
from .errors import FactorizationError
from .gpr import GprHyperParams, OptimBounds, gpr_posterior, optimize_hyperparams
from .protocol.engine import (
    DomainMetrics,
    SimilarityModel,
    _resolve_splits,
    fit_similarity_model,
    load_run_data,
    select_lambda,
)
from .protocol.weights import compute_domain_weights
from .seeds import derive_seed

logger = logging.getLogger(__name__)

__all__ = ["OracleResult", "StandardizedViews", "standardized_views", "run_oracle"]

VARIANCE_DROP_TOL = 1e-12


@dataclass(frozen=True)
class StandardizedViews:
    """Pooled-plaintext standardized data shared by oracle stages.

    ``x_pool``/``y_pool`` are the concatenated source rows after
    zero-variance drops and pooled standardization; ``y_pool`` is on
    the transformed, standardized label scale.  Target features use the
    source statistics, matching what the protocol's target client sees.
    """

    x_pool: np.ndarray
    y_pool: np.ndarray
    x_target: np.ndarray
    y_target_std: np.ndarray
    target_domains: np.ndarray
    target_ages: np.ndarray
    kept_columns: tuple
    dropped_columns: tuple
    shard_slices: tuple
    label_mean: float
    label_sd: float
    age_params: AgeTransformParams

    def to_years(self, z_std: np.ndarray) -> np.ndarray:
        return age_transform_inverse(
            z_std * self.label_sd + self.label_mean, self.age_params
        )


def standardized_views(config, shards=None, target=None, similarity=None) -> StandardizedViews:
    """Pool, drop degenerate columns, and standardize exactly once."""
    if shards is None:
        shards, target, similarity = load_run_data(config)
    age_params = AgeTransformParams(config.age_adult)
    stats = merge_stats([local_stats(s.features) for s in shards])
    dropped = tuple(int(j) for j in np.flatnonzero(stats.variance() <= VARIANCE_DROP_TOL))
    keep = [j for j in range(stats.width) if j not in set(dropped)]
    kept_stats = (
        stats
        if not dropped
        else replace(stats, sum=stats.sum[keep], sum_sq=stats.sum_sq[keep])
    )

    x_parts, y_parts, slices = [], [], []
    start = 0
    for s in shards:
        x_parts.append(standardize_columns(s.features[:, keep], kept_stats))
        y_parts.append(age_transform(s.labels, age_params))
        slices.append((start, start + s.n_samples))
        start += s.n_samples
    x_pool = np.concatenate(x_parts, axis=0)
    z_pool = np.concatenate(y_parts)
    z_stats = local_stats(z_pool[:, None])
    if z_stats.variance()[0] <= VARIANCE_DROP_TOL:
        raise ValueError("pooled labels have zero variance")
    mean, sd = float(z_stats.mean()[0]), float(z_stats.sd()[0])
    y_pool = (z_pool - mean) / sd

    x_target = standardize_columns(target.features[:, keep], kept_stats)
    z_target = (age_transform(target.labels, age_params) - mean) / sd
    return StandardizedViews(
        x_pool=x_pool,
        y_pool=y_pool,
        x_target=x_target,
        y_target_std=z_target,
        target_domains=target.domain_ids,
        target_ages=target.labels,
        kept_columns=tuple(keep),
        dropped_columns=dropped,
        shard_slices=tuple(slices),
        label_mean=mean,
        label_sd=sd,
        age_params=age_params,
    )


@dataclass
class OracleResult:
    """Centralized counterpart of a protocol run's outputs."""

    metrics: list
    models: dict
    feature_means: np.ndarray
    feature_vars: np.ndarray
    weights: dict
    similarity_model: Optional[SimilarityModel]
    lambda_opt: dict
    hp: np.ndarray
    dropped_columns: list
    config_digest: str
    master_seed: int
    views: StandardizedViews = None
    notes: list = field(default_factory=list)

    def metrics_csv(self) -> str:
        lines = [
            f"# config_digest={self.config_digest}",
            f"# master_seed={self.master_seed}",
            "# pipeline=centralized-oracle",
            "domain_id,n_samples,lambda_used,mae_freda,mae_enls",
        ]
        for m in self.metrics:
            lines.append(
                f"{m.domain_id},{m.n_samples},{m.lambda_used!r},"
                f"{m.mae_freda!r},{m.mae_enls!r}"
            )
        return "\n".join(lines) + "\n"


def average_local_hyperparams(views: StandardizedViews, config) -> np.ndarray:
    """Per-feature mean of each shard's locally optimized (variance, noise).

    Matches the protocol's aggregation contract: clients optimize on
    their own rows only, and the global pair is the plain average.
    """
    import math

    bounds = OptimBounds(
        (math.log(config.gpr.sigma_lo), math.log(config.gpr.sigma_hi)),
        (math.log(config.gpr.sigma_lo), math.log(config.gpr.sigma_hi)),
        config.gpr.max_evals,
    )
    init = GprHyperParams(config.gpr.init_sigma_p2, config.gpr.init_sigma_n2)
    p = views.x_pool.shape[1]
    n_total = views.x_pool.shape[0]
    n_clients = len(views.shard_slices)
    acc = np.zeros((p, 2))
    for start, stop in views.shard_slices:
        x_i = views.x_pool[start:stop]
        hp_mat = np.empty((p, 2))
        for f in range(p):
            x_minus = np.delete(x_i, f, axis=1)
            try:
                opt = optimize_hyperparams(x_minus, x_i[:, f], bounds, init)
            except FactorizationError:
                opt = init
            hp_mat[f] = (opt.sigma_p2, opt.sigma_n2)
        scale = (
            (stop - start) * n_clients / n_total if config.gpr.sample_weighted else 1.0
        )
        acc += hp_mat * scale
    return acc / n_clients


def pooled_feature_models(views: StandardizedViews, hp: np.ndarray):
    """Posterior mean and variance of every feature model at the target."""
    p = views.x_pool.shape[1]
    means = np.empty((views.x_target.shape[0], p))
    variances = np.empty_like(means)
    for f in range(p):
        pred = gpr_posterior(
            np.delete(views.x_pool, f, axis=1),
            views.x_pool[:, f],
            np.delete(views.x_target, f, axis=1),
            GprHyperParams(float(hp[f, 0]), float(hp[f, 1])),
        )
        means[:, f] = pred.mean
        variances[:, f] = pred.variance
    return means, variances


def run_oracle(config) -> OracleResult:
    """Full centralized pipeline on the same data a protocol run uses."""
    shards, target, similarity = load_run_data(config)
    domains = sorted(set(int(d) for d in target.domain_ids))
    counts = {dm: int(np.sum(target.domain_ids == dm)) for dm in domains}
    splits = _resolve_splits(config, domains, counts)
    views = standardized_views(config, shards, target, similarity)

    hp = average_local_hyperparams(views, config)
    means, variances = pooled_feature_models(views, hp)
    weights = compute_domain_weights(
        views.x_target, views.target_domains, means, variances, config.k
    )

    def domain_mae_years(beta, rows):
        years = views.to_years(views.x_target[rows] @ beta)
        return wen.mae(years, views.target_ages[rows])

    all_rows = []
    lambda_opt = {}
    similarity_model = None
    final_models = {}
    for t1, t2 in splits:
        for dm in t1:
            cfg = wen.WenConfig(weights=weights[dm].weights, alpha=config.alpha)
            grid = wen.lambda_grid(
                views.x_pool, views.y_pool, cfg, config.wen.grid_size, config.wen.grid_ratio
            )
            rows = views.target_domains == dm
            maes = []
            for lam in grid.values:
                model = wen.centralized_wen_oracle(
                    views.x_pool, views.y_pool, replace(cfg, lam=float(lam))
                )
                maes.append(domain_mae_years(model.beta, rows))
            _, lam_best = select_lambda(grid.values, maes)
            lambda_opt[dm] = lam_best

        similarity_model = fit_similarity_model(
            [similarity[dm] for dm in t1],
            [lambda_opt[dm] for dm in t1],
            log_space=config.lambda_fit == "log",
        )
        for dm in t2:
            lam = similarity_model.predict_lambda(similarity[dm])
            cfg = wen.WenConfig(weights=weights[dm].weights, lam=lam, alpha=config.alpha)
            model = wen.centralized_wen_oracle(views.x_pool, views.y_pool, cfg)
            final_models[dm] = model
            rows = views.target_domains == dm
            all_rows.append((dm, lam, domain_mae_years(model.beta, rows)))

    baseline = wen.en_ls_baseline(
        views.x_pool,
        views.y_pool,
        alpha=config.alpha,
        folds=min(10, views.x_pool.shape[0]),
        seed=derive_seed(config.master_seed, "baseline-folds"),
    )
    metrics = []
    for dm, lam, mae_freda in all_rows:
        rows = views.target_domains == dm
        metrics.append(
            DomainMetrics(
                domain_id=dm,
                n_samples=counts[dm],
                lambda_used=lam,
                mae_freda=mae_freda,
                mae_enls=domain_mae_years(baseline.beta, rows),
            )
        )
    return OracleResult(
        metrics=metrics,
        models=final_models,
        feature_means=means,
        feature_vars=variances,
        weights=weights,
        similarity_model=similarity_model,
        lambda_opt=lambda_opt,
        hp=hp,
        dropped_columns=list(views.dropped_columns),
        config_digest=config.digest(),
        master_seed=config.master_seed,
        views=views,
    )
