"""Feature confidence scores and the weights derived from them.

For every target sample and feature, the feature model's posterior
gives a mean and standard deviation; the confidence is the two-sided
tail probability of the observed value under that posterior, averaged
per target domain.  Features whose dependency structure broke under
the shift collect low confidence and therefore weights near 1, which
the weighted elastic net turns into a strong penalty.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

logger = logging.getLogger(__name__)

__all__ = ["DomainWeights", "confidence_scores", "compute_domain_weights"]


@dataclass(frozen=True)
class DomainWeights:
    """Per-domain feature confidences and the (1-c)^k penalty weights."""

    domain_id: int
    confidence: np.ndarray
    weights: np.ndarray
    k: float

    def __post_init__(self):
        c = np.ascontiguousarray(self.confidence, dtype=np.float64)
        w = np.ascontiguousarray(self.weights, dtype=np.float64)
        if c.shape != w.shape or c.ndim != 1:
            raise ValueError("confidence and weights must be matching vectors")
        if np.any(c < 0) or np.any(c > 1):
            raise ValueError("confidences must lie in [0, 1]")
        if self.k <= 0:
            raise ValueError("k must be positive")
        if not np.array_equal(w, (1.0 - c) ** self.k):
            raise ValueError("weights are not (1 - confidence)^k")
        object.__setattr__(self, "confidence", c)
        object.__setattr__(self, "weights", w)


def confidence_scores(values: np.ndarray, means: np.ndarray, variances: np.ndarray) -> np.ndarray:
    """Per-sample, per-feature two-sided tail probabilities.

    c = 2 * Phi(-|value - mean| / sd), which is 1 at a perfect match and
    falls toward 0 as the observation moves into the tails.  A zero
    posterior sd scores 1 on an exact residual match and 0 otherwise.
    """
    values = np.asarray(values, dtype=np.float64)
    means = np.asarray(means, dtype=np.float64)
    variances = np.asarray(variances, dtype=np.float64)
    if values.shape != means.shape or values.shape != variances.shape:
        raise ValueError("values, means, and variances must share a shape")
    if np.any(variances < 0):
        raise ValueError("variances must be non-negative")
    sd = np.sqrt(variances)
    resid = np.abs(values - means)
    degenerate = sd == 0
    n_degenerate = int(np.count_nonzero(degenerate))
    if n_degenerate:
        logger.warning("confidence: %d zero-sd cells scored by exact match", n_degenerate)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(degenerate, 0.0, resid / np.where(degenerate, 1.0, sd))
    c = 2.0 * ndtr(-z)
    return np.where(degenerate, np.where(resid == 0, 1.0, 0.0), c)


def compute_domain_weights(
    values: np.ndarray,
    domain_ids: np.ndarray,
    means: np.ndarray,
    variances: np.ndarray,
    k: float,
) -> dict:
    """Per-domain averaged confidences and weights.

    Each domain's confidence vector averages only that domain's rows,
    so domains do not contaminate each other.
    """
    domain_ids = np.asarray(domain_ids)
    scores = confidence_scores(values, means, variances)
    out = {}
    for dm in sorted(set(int(d) for d in domain_ids)):
        rows = domain_ids == dm
        c = scores[rows].mean(axis=0)
        out[dm] = DomainWeights(
            domain_id=dm, confidence=c, weights=(1.0 - c) ** k, k=float(k)
        )
    return out
