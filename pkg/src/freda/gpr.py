"""Linear-kernel Gaussian-process regression.

Provides kernel evaluation, the log marginal likelihood and its
gradient, a deterministic hyper-parameter optimizer, and the posterior
predictive distribution.  The posterior can be assembled either from
raw design matrices or from precomputed Gram blocks; the latter is what
the aggregator uses, since masked data preserves Gram products.

All factorizations go through one Cholesky helper with a fixed jitter
retry ladder; an explicit matrix inverse is never formed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular

from .errors import FactorizationError

__all__ = [
    "GprHyperParams",
    "GprPrediction",
    "OptimBounds",
    "linear_kernel",
    "log_marginal_likelihood",
    "lml_gradient",
    "optimize_hyperparams",
    "gpr_posterior",
    "posterior_from_grams",
    "mean_operator",
]

# diagonal boosts tried in order when a factorization fails (absolute)
JITTER_LADDER = (0.0, 1e-8, 1e-6, 1e-4)

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class GprHyperParams:
    """Kernel variance and additive noise variance of the linear GP."""

    sigma_p2: float
    sigma_n2: float

    def __post_init__(self):
        for name in ("sigma_p2", "sigma_n2"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be finite and > 0, got {v!r}")
        object.__setattr__(self, "sigma_p2", float(self.sigma_p2))
        object.__setattr__(self, "sigma_n2", float(self.sigma_n2))


@dataclass(frozen=True)
class GprPrediction:
    """Posterior mean, covariance, and clamped per-point variance."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.ascontiguousarray(self.mean, dtype=np.float64)
        cov = np.ascontiguousarray(self.cov, dtype=np.float64)
        n = mean.shape[0]
        if mean.ndim != 1 or cov.shape != (n, n):
            raise ValueError("mean must be 1-d and cov square of matching size")
        if n and np.max(np.abs(cov - cov.T)) > 1e-8:
            raise ValueError("covariance is not symmetric")
        if n and np.min(np.diagonal(cov)) < -1e-8:
            raise ValueError("covariance diagonal has a significantly negative entry")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", (cov + cov.T) / 2.0)

    @property
    def variance(self) -> np.ndarray:
        return np.maximum(np.diagonal(self.cov), 0.0)

    @property
    def sd(self) -> np.ndarray:
        return np.sqrt(self.variance)


@dataclass(frozen=True)
class OptimBounds:
    """Log-space search box and evaluation budget for the optimizer."""

    log_sigma_p2: tuple = (math.log(1e-6), math.log(1e3))
    log_sigma_n2: tuple = (math.log(1e-6), math.log(1e3))
    max_evals: int = 400

    def __post_init__(self):
        for name in ("log_sigma_p2", "log_sigma_n2"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise ValueError(f"{name}: lo must be < hi")
            object.__setattr__(self, name, (float(lo), float(hi)))
        if self.max_evals < 1:
            raise ValueError("max_evals must be >= 1")


# ---------------------------------------------------------------------------
# Kernel and factorization
# ---------------------------------------------------------------------------


def linear_kernel(a: np.ndarray, b: np.ndarray, sigma_p2: float) -> np.ndarray:
    """sigma_p2 * A @ B.T for row-sample matrices with matching width."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"incompatible shapes {a.shape} and {b.shape}")
    return sigma_p2 * (a @ b.T)


def _chol_jittered(k: np.ndarray):
    """Lower Cholesky factor of ``k``, boosting the diagonal on failure.

    Returns (L, jitter_used).  Raises FactorizationError after the last
    rung of the ladder fails; failure is loud, never silent.
    """
    n = k.shape[0]
    eye = np.eye(n)
    for jitter in JITTER_LADDER:
        try:
            return cholesky(k + jitter * eye if jitter else k, lower=True), jitter
        except np.linalg.LinAlgError:
            continue
    raise FactorizationError(
        f"Cholesky failed for {n}x{n} kernel even with diagonal boost "
        f"{JITTER_LADDER[-1]:g}"
    )


def _train_kernel(gram_ss: np.ndarray, hp: GprHyperParams) -> np.ndarray:
    return hp.sigma_p2 * gram_ss + hp.sigma_n2 * np.eye(gram_ss.shape[0])


# ---------------------------------------------------------------------------
# Marginal likelihood
# ---------------------------------------------------------------------------


def log_marginal_likelihood(x: np.ndarray, y: np.ndarray, hp: GprHyperParams) -> float:
    """Gaussian log evidence of ``y`` under the linear-kernel prior."""
    return lml_from_gram(np.asarray(x) @ np.asarray(x).T, y, hp)


def lml_from_gram(gram: np.ndarray, y: np.ndarray, hp: GprHyperParams) -> float:
    y = np.asarray(y, dtype=np.float64)
    n = y.shape[0]
    if n < 1:
        raise ValueError("need at least one sample")
    L, _ = _chol_jittered(_train_kernel(np.asarray(gram, dtype=np.float64), hp))
    alpha = cho_solve((L, True), y)
    return float(-0.5 * (y @ alpha) - np.log(np.diagonal(L)).sum() - 0.5 * n * LOG_2PI)


def lml_gradient(x: np.ndarray, y: np.ndarray, hp: GprHyperParams):
    """Partial derivatives of the log evidence wrt (sigma_p2, sigma_n2).

    Uses the standard identity d/dθ = ½ αᵀ(dK/dθ)α − ½ tr(K⁻¹ dK/dθ)
    with α = K⁻¹y; dK/dσ_p² = XXᵀ and dK/dσ_n² = I.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    gram = x @ x.T
    n = y.shape[0]
    L, _ = _chol_jittered(_train_kernel(gram, hp))
    alpha = cho_solve((L, True), y)
    l_inv = solve_triangular(L, np.eye(n), lower=True)
    k_inv = l_inv.T @ l_inv
    d_p2 = 0.5 * (alpha @ gram @ alpha) - 0.5 * np.sum(k_inv * gram)
    d_n2 = 0.5 * (alpha @ alpha) - 0.5 * np.trace(k_inv)
    return float(d_p2), float(d_n2)


# ---------------------------------------------------------------------------
# Hyper-parameter optimization
# ---------------------------------------------------------------------------

GRID_SIDE = 16


def optimize_hyperparams(
    x: np.ndarray,
    y: np.ndarray,
    bounds: OptimBounds = OptimBounds(),
    init: GprHyperParams = GprHyperParams(1.0, 1.0),
) -> GprHyperParams:
    """Deterministic log-space maximization of the marginal likelihood.

    A coarse 16x16 grid over the bounds seeds a gradient ascent with
    backtracking line search; every likelihood evaluation counts against
    ``bounds.max_evals``.  The result never scores below ``init``:
    if the search cannot improve on it, ``init`` is returned unchanged.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    gram = x @ x.T
    evals = 0

    def objective(theta) -> float:
        nonlocal evals
        evals += 1
        try:
            return lml_from_gram(gram, y, GprHyperParams(math.exp(theta[0]), math.exp(theta[1])))
        except FactorizationError:
            return -math.inf

    lo = np.array([bounds.log_sigma_p2[0], bounds.log_sigma_n2[0]])
    hi = np.array([bounds.log_sigma_p2[1], bounds.log_sigma_n2[1]])

    try:
        init_val = log_marginal_likelihood(x, y, init)
    except FactorizationError:
        init_val = -math.inf

    best_theta = None
    best_val = -math.inf
    p_axis = np.linspace(lo[0], hi[0], GRID_SIDE)
    n_axis = np.linspace(lo[1], hi[1], GRID_SIDE)
    for tp in p_axis:
        for tn in n_axis:
            if evals >= bounds.max_evals:
                break
            val = objective((tp, tn))
            if val > best_val:
                best_val, best_theta = val, np.array([tp, tn])

    if best_theta is None or not math.isfinite(best_val):
        if math.isfinite(init_val):
            return init
        raise FactorizationError("every hyper-parameter probe failed to factorize")

    # gradient ascent with backtracking from the best grid cell
    theta = best_theta
    step = 0.5
    while evals < bounds.max_evals and step > 1e-7:
        hp = GprHyperParams(math.exp(theta[0]), math.exp(theta[1]))
        try:
            g = np.array(lml_gradient(x, y, hp)) * np.exp(theta)  # chain rule to log-space
        except FactorizationError:
            break
        if np.linalg.norm(g) <= 1e-7:
            break
        cand = np.clip(theta + step * g / max(np.linalg.norm(g), 1.0), lo, hi)
        val = objective(cand)
        if val > best_val + 1e-12:
            theta, best_val = cand, val
            best_theta = cand
            step = min(step * 1.5, 2.0)
        else:
            step *= 0.5

    if best_val <= init_val:
        return init
    return GprHyperParams(math.exp(best_theta[0]), math.exp(best_theta[1]))


# ---------------------------------------------------------------------------
# Posterior
# ---------------------------------------------------------------------------


def mean_operator(gram_ss: np.ndarray, gram_st: np.ndarray, hp: GprHyperParams) -> np.ndarray:
    """The matrix K* K^-1 (test rows by train rows).

    Applying it to the train labels gives the posterior mean; its
    product with K*^T gives the posterior covariance reduction.  The
    protocol masks and distributes exactly this operator, so it shares
    the factorization (and jitter ladder) with the posterior path.
    """
    gram_ss = np.asarray(gram_ss, dtype=np.float64)
    gram_st = np.asarray(gram_st, dtype=np.float64)
    L, _ = _chol_jittered(_train_kernel(gram_ss, hp))
    k_star = hp.sigma_p2 * gram_st.T
    return cho_solve((L, True), k_star.T).T


def posterior_from_grams(
    gram_ss: np.ndarray,
    gram_st: np.ndarray,
    gram_tt: np.ndarray,
    y: np.ndarray,
    hp: GprHyperParams,
) -> GprPrediction:
    """Posterior predictive from Gram blocks.

    ``gram_ss`` is the train Gram (n_s x n_s), ``gram_st`` the
    train-by-test cross block (n_s x n_t), ``gram_tt`` the test Gram.
    The cross kernel used in the mean is oriented test-rows by
    train-rows, so the mean is (sigma_p2 * gram_st.T) @ K^-1 @ y.
    """
    gram_ss = np.asarray(gram_ss, dtype=np.float64)
    gram_st = np.asarray(gram_st, dtype=np.float64)
    gram_tt = np.asarray(gram_tt, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n_s = gram_ss.shape[0]
    n_t = gram_tt.shape[0]
    if gram_ss.shape != (n_s, n_s) or gram_st.shape != (n_s, n_t) or gram_tt.shape != (n_t, n_t):
        raise ValueError(
            f"inconsistent Gram blocks: {gram_ss.shape}, {gram_st.shape}, {gram_tt.shape}"
        )
    if y.shape != (n_s,):
        raise ValueError("label length does not match the train Gram")

    L, _ = _chol_jittered(_train_kernel(gram_ss, hp))
    k_star = hp.sigma_p2 * gram_st.T  # n_t x n_s
    mean = k_star @ cho_solve((L, True), y)
    v = solve_triangular(L, k_star.T, lower=True)  # K* K^-1 K*' = v' v
    cov = hp.sigma_p2 * gram_tt - v.T @ v
    return GprPrediction(mean=mean, cov=cov)


def gpr_posterior(
    x_train: np.ndarray,
    y: np.ndarray,
    x_test: np.ndarray,
    hp: GprHyperParams,
) -> GprPrediction:
    """Posterior predictive at ``x_test`` given training rows and labels."""
    x_train = np.asarray(x_train, dtype=np.float64)
    x_test = np.asarray(x_test, dtype=np.float64)
    if x_train.ndim != 2 or x_test.ndim != 2 or x_train.shape[1] != x_test.shape[1]:
        raise ValueError(
            f"incompatible design matrices {x_train.shape} and {x_test.shape}"
        )
    return posterior_from_grams(
        x_train @ x_train.T, x_train @ x_test.T, x_test @ x_test.T, y, hp
    )
