"""Weighted elastic net: objective, subgradient steps, the federated
trainer, a coordinate-descent oracle, and the least-squares baseline.

The federated trainer reproduces centralized full-batch subgradient
descent exactly when clients run one local epoch: each client trains on
its shard RSS plus its sample-share of the penalty, with its step size
scaled by the inverse of that share, and the aggregator averages
coefficients weighted by shard size.  The algebra is spelled out on
:func:`train_federated_wen`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .seeds import derive_rng

logger = logging.getLogger(__name__)

__all__ = [
    "WenConfig",
    "WenModel",
    "LambdaGrid",
    "wen_objective",
    "lr_schedule",
    "local_update",
    "fedavg_round",
    "train_federated_wen",
    "centralized_wen_oracle",
    "lambda_grid",
    "lambda_grid_from_scores",
    "en_ls_baseline",
    "predict",
    "mae",
]

LAMBDA_GRID_SIZE = 20
LAMBDA_GRID_RATIO = 1e-4
WEIGHT_FLOOR = 0.01


@dataclass(frozen=True)
class WenConfig:
    """Penalty, feature weights, and training schedule."""

    weights: np.ndarray
    lam: float = 0.0
    alpha: float = 0.8
    global_rounds: int = 100
    local_epochs: int = 20
    eta0: float = 1e-4
    eta_final: float = 1e-5

    def __post_init__(self):
        w = np.ascontiguousarray(self.weights, dtype=np.float64)
        if w.ndim != 1:
            raise ValueError("weights must be a vector")
        if not np.all(np.isfinite(w)) or np.any(w < 0):
            raise ValueError("weights must be finite and >= 0")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must lie in (0, 1]")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.global_rounds < 1 or self.local_epochs < 1:
            raise ValueError("global_rounds and local_epochs must be >= 1")
        if not 0.0 < self.eta_final <= self.eta0:
            raise ValueError("need 0 < eta_final <= eta0")
        object.__setattr__(self, "weights", w)

    @property
    def n_features(self) -> int:
        return self.weights.shape[0]


@dataclass(frozen=True)
class WenModel:
    """Coefficient vector of a fitted model (no intercept)."""

    beta: np.ndarray

    def __post_init__(self):
        beta = np.ascontiguousarray(self.beta, dtype=np.float64)
        if beta.ndim != 1 or not np.all(np.isfinite(beta)):
            raise ValueError("coefficients must be a finite vector")
        object.__setattr__(self, "beta", beta)

    @property
    def support(self) -> np.ndarray:
        return np.flatnonzero(self.beta != 0.0)


@dataclass(frozen=True)
class LambdaGrid:
    """Consistently monotone positive penalty grid."""

    values: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(self.values, dtype=np.float64)
        if v.ndim != 1 or v.size < 1:
            raise ValueError("grid must be a nonempty vector")
        if np.any(v <= 0):
            raise ValueError("grid values must be positive")
        diffs = np.diff(v)
        if diffs.size and not (np.all(diffs > 0) or np.all(diffs < 0)):
            raise ValueError("grid must be strictly monotone")
        object.__setattr__(self, "values", v)

    @property
    def size(self) -> int:
        return self.values.shape[0]


# ---------------------------------------------------------------------------
# Objective and steps
# ---------------------------------------------------------------------------


def _check_design(x: np.ndarray, y: np.ndarray, width: int):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.shape != (x.shape[0],):
        raise ValueError(f"design {x.shape} and labels {y.shape} do not conform")
    if x.shape[1] != width:
        raise ValueError(f"design has {x.shape[1]} columns, config expects {width}")
    return x, y


def wen_objective(x: np.ndarray, y: np.ndarray, beta: np.ndarray, cfg: WenConfig) -> float:
    """RSS plus the weighted elastic-net penalty."""
    x, y = _check_design(x, y, cfg.n_features)
    beta = np.asarray(beta, dtype=np.float64)
    resid = y - x @ beta
    w = cfg.weights
    penalty = cfg.alpha * np.sum(w * np.abs(beta)) + 0.5 * (1.0 - cfg.alpha) * np.sum(
        w * beta * beta
    )
    return float(resid @ resid + cfg.lam * penalty)


def lr_schedule(t: int, total: int, eta0: float, eta_final: float) -> float:
    """Exponential decay from eta0 at t=0 to eta_final at t=total."""
    if total == 0:
        raise ValueError("schedule length must be positive")
    if not 0 <= t <= total:
        raise ValueError(f"step {t} outside 0..{total}")
    return float(eta0 * (eta_final / eta0) ** (t / total))


def local_update(
    model: WenModel, x: np.ndarray, y: np.ndarray, cfg: WenConfig, eta: float
) -> WenModel:
    """``cfg.local_epochs`` full-batch subgradient steps at step size eta.

    The L1 subgradient uses sign(0) = 0.
    """
    x, y = _check_design(x, y, cfg.n_features)
    beta = model.beta.copy()
    w = cfg.weights
    for _ in range(cfg.local_epochs):
        grad = -2.0 * (x.T @ (y - x @ beta))
        grad += cfg.lam * (cfg.alpha * w * np.sign(beta) + (1.0 - cfg.alpha) * w * beta)
        beta = beta - eta * grad
    return WenModel(beta)


def fedavg_round(models: Sequence[WenModel], counts: Sequence[int]) -> WenModel:
    """Sample-weighted coefficient average: sum of (n_i / n) * beta_i.

    Normalizing each weight before the sum keeps the single-client case
    an exact identity.
    """
    models = list(models)
    if not models:
        raise ValueError("no models to average")
    counts = [int(c) for c in counts]
    if len(counts) != len(models) or any(c <= 0 for c in counts):
        raise ValueError("need one positive count per model")
    width = models[0].beta.shape[0]
    if any(m.beta.shape[0] != width for m in models):
        raise ValueError("coefficient length mismatch")
    total = sum(counts)
    acc = (counts[0] / total) * models[0].beta
    for m, c in zip(models[1:], counts[1:]):
        acc = acc + (c / total) * m.beta
    return WenModel(acc)


def _plain_sum(contributions: Sequence[np.ndarray]) -> np.ndarray:
    acc = np.array(contributions[0], dtype=np.float64, copy=True)
    for c in contributions[1:]:
        acc += c
    return acc


def train_federated_wen(
    shards: Sequence[tuple],
    cfg: WenConfig,
    secure_sum_hook: Optional[Callable[[Sequence[np.ndarray]], np.ndarray]] = None,
) -> WenModel:
    """Round-based federated training over ``(x_i, y_i)`` shards.

    Per round t, every client starts from the global coefficients and
    runs ``local_epochs`` subgradient steps on its own loss

        RSS_i(beta) + (n_i / n) * lam * J(beta)

    at step size eta(t) * (n / n_i); the new global model is the
    shard-size-weighted average sum_i (n_i / n) * beta_i, computed
    through ``secure_sum_hook`` over the pre-weighted contributions.
    With one local epoch, expanding the average shows every round
    equals one centralized full-batch step on the pooled data: shard
    RSS gradients add, and the penalty shares recombine to one J term.
    More local epochs trade that exactness for fewer rounds.
    """
    shards = [(np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)) for x, y in shards]
    if not shards:
        raise ValueError("no shards")
    for x, y in shards:
        _check_design(x, y, cfg.n_features)
    hook = secure_sum_hook if secure_sum_hook is not None else _plain_sum
    counts = [y.shape[0] for _, y in shards]
    total = sum(counts)
    beta = np.zeros(cfg.n_features)
    for t in range(cfg.global_rounds):
        eta = lr_schedule(t, cfg.global_rounds, cfg.eta0, cfg.eta_final)
        contributions = []
        for (x_i, y_i), n_i in zip(shards, counts):
            share = n_i / total
            local_cfg = replace(cfg, lam=cfg.lam * share, local_epochs=cfg.local_epochs)
            local = local_update(WenModel(beta), x_i, y_i, local_cfg, eta * (total / n_i))
            contributions.append(share * local.beta)
        beta = np.asarray(hook(contributions), dtype=np.float64)
    return WenModel(beta)


# ---------------------------------------------------------------------------
# Coordinate-descent oracle
# ---------------------------------------------------------------------------


def _soft_threshold(z: float, t: float) -> float:
    if z > t:
        return z - t
    if z < -t:
        return z + t
    return 0.0


def centralized_wen_oracle(
    x: np.ndarray,
    y: np.ndarray,
    cfg: WenConfig,
    tol: float = 1e-10,
    max_sweeps: int = 10_000,
) -> WenModel:
    """Cyclic coordinate descent with exact per-coordinate minimization.

    Each coordinate solves its 1-d subproblem in closed form via the
    soft threshold, so the objective never increases and sufficiently
    penalized coordinates land on exact zeros.
    """
    x, y = _check_design(x, y, cfg.n_features)
    p = cfg.n_features
    w = cfg.weights
    beta = np.zeros(p)
    resid = y.copy()
    col_norm2 = 2.0 * np.einsum("ij,ij->j", x, x)
    denom = col_norm2 + cfg.lam * (1.0 - cfg.alpha) * w
    thresh = cfg.lam * cfg.alpha * w
    for _ in range(max_sweeps):
        max_delta = 0.0
        for f in range(p):
            old = beta[f]
            rho = 2.0 * (x[:, f] @ resid) + col_norm2[f] * old
            new = _soft_threshold(rho, thresh[f]) / denom[f] if denom[f] > 0 else 0.0
            if new != old:
                resid += x[:, f] * (old - new)
                beta[f] = new
                max_delta = max(max_delta, abs(new - old))
        if max_delta <= tol:
            break
    else:
        logger.warning("coordinate descent hit the sweep cap (max delta %.3g)", max_delta)
    return WenModel(beta)


def lambda_grid_from_scores(
    scores: np.ndarray,
    weights: np.ndarray,
    alpha: float,
    size: int = LAMBDA_GRID_SIZE,
    ratio: float = LAMBDA_GRID_RATIO,
) -> LambdaGrid:
    """Grid construction from precomputed per-feature scores 2 * x_f @ y.

    Split out so an aggregator holding only the (securely summed) score
    vector builds exactly the same grid as a pooled-data caller.
    """
    scores = np.asarray(scores, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if scores.shape != weights.shape or scores.ndim != 1:
        raise ValueError("scores and weights must be matching vectors")
    lam_max = float(np.max(np.abs(scores) / (alpha * np.maximum(weights, WEIGHT_FLOOR))))
    if lam_max <= 0.0:
        raise ValueError("degenerate design: all feature-label products are zero")
    if size == 1:
        return LambdaGrid(np.array([lam_max]))
    exponents = np.arange(size) / (size - 1)
    return LambdaGrid(lam_max * ratio**exponents)


def lambda_grid(x: np.ndarray, y: np.ndarray, cfg: WenConfig, size: int = LAMBDA_GRID_SIZE,
                ratio: float = LAMBDA_GRID_RATIO) -> LambdaGrid:
    """Geometric penalty grid from the full-shrinkage point downward.

    The top value is the smallest penalty that zeroes every coordinate
    of the oracle started at zero; near-zero feature weights are floored
    at 0.01 so they cannot blow the grid up.
    """
    x, y = _check_design(x, y, cfg.n_features)
    return lambda_grid_from_scores(2.0 * (x.T @ y), cfg.weights, cfg.alpha, size, ratio)


# ---------------------------------------------------------------------------
# Baseline and evaluation
# ---------------------------------------------------------------------------


def en_ls_baseline(
    x: np.ndarray,
    y: np.ndarray,
    alpha: float = 0.8,
    folds: int = 10,
    seed: int = 0,
) -> WenModel:
    """Unweighted elastic net with CV-chosen penalty, then an OLS refit
    restricted to the selected support.

    Fold assignment is a seeded permutation; the penalty minimizing the
    mean held-out squared error wins, with ties going to the larger
    penalty.  An empty support skips the refit and keeps the shrunk
    coefficients.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, p = x.shape
    if not 2 <= folds <= n:
        raise ValueError(f"need 2 <= folds <= n, got folds={folds}, n={n}")
    base = WenConfig(weights=np.ones(p), alpha=alpha)
    grid = lambda_grid(x, y, base)

    perm = derive_rng(seed, "cv-folds").permutation(n)
    fold_of = np.empty(n, dtype=np.int64)
    fold_of[perm] = np.arange(n) % folds

    best_lam, best_mse = None, np.inf
    for lam in grid.values:  # decreasing, so ties keep the larger penalty
        cfg = replace(base, lam=float(lam))
        errs = []
        for fold in range(folds):
            hold = fold_of == fold
            model = centralized_wen_oracle(x[~hold], y[~hold], cfg)
            r = y[hold] - x[hold] @ model.beta
            errs.append(float(r @ r) / max(int(hold.sum()), 1))
        mse = float(np.mean(errs))
        if mse < best_mse:
            best_mse, best_lam = mse, float(lam)

    fit = centralized_wen_oracle(x, y, replace(base, lam=best_lam))
    support = fit.support
    if support.size == 0:
        logger.warning("baseline selected an empty support; returning shrunk fit")
        return fit
    coef, *_ = np.linalg.lstsq(x[:, support], y, rcond=None)
    beta = np.zeros(p)
    beta[support] = coef
    return WenModel(beta)


def predict(model: WenModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.beta.shape[0]:
        raise ValueError(f"design {x.shape} does not match {model.beta.shape[0]} coefficients")
    return x @ model.beta


def mae(pred: np.ndarray, truth: np.ndarray) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError("prediction and truth shapes differ")
    return float(np.mean(np.abs(pred - truth)))
