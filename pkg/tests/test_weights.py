import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from freda.protocol.weights import (
    DomainWeights,
    compute_domain_weights,
    confidence_scores,
)


def _c(z):
    """Confidence of a unit-variance observation z away from its mean."""
    return confidence_scores(np.array([z]), np.array([0.0]), np.array([1.0]))[0]


def test_confidence_exact_match_is_one():
    assert _c(0.0) == pytest.approx(1.0, abs=1e-15)


def test_confidence_strictly_decreasing_in_z():
    zs = np.linspace(0.0, 6.0, 40)
    cs = [_c(z) for z in zs]
    assert all(a > b for a, b in zip(cs, cs[1:]))


def test_confidence_range():
    for z in (0.0, 0.1, 1.0, 3.0, 10.0):
        c = _c(z)
        assert 0.0 < c <= 1.0


def test_confidence_spot_value():
    # the two-sided 95% point
    assert _c(1.96) == pytest.approx(0.05, abs=5e-4)


def test_confidence_symmetric_in_sign():
    assert _c(2.3) == _c(-2.3)


def test_confidence_scales_with_sd():
    # same residual, more posterior spread -> higher confidence
    lo = confidence_scores(np.array([1.0]), np.array([0.0]), np.array([0.25]))[0]
    hi = confidence_scores(np.array([1.0]), np.array([0.0]), np.array([4.0]))[0]
    assert hi > lo


def test_confidence_zero_sd_exact_match_rule():
    c = confidence_scores(np.array([1.0, 2.0]), np.array([1.0, 1.0]),
                          np.array([0.0, 0.0]))
    assert c.tolist() == [1.0, 0.0]


def test_confidence_shape_and_sign_checks():
    with pytest.raises(ValueError):
        confidence_scores(np.zeros(3), np.zeros(2), np.zeros(3))
    with pytest.raises(ValueError):
        confidence_scores(np.zeros(1), np.zeros(1), np.array([-1.0]))


# ---------------------------------------------------------------------------
# Weights
# ---------------------------------------------------------------------------


def test_weight_spot_value_k3():
    c = _c(1.96)
    w = (1.0 - c) ** 3
    assert w == pytest.approx((1.0 - 0.05) ** 3, abs=2e-3)
    assert 0.0 <= w < 1.0


def test_weight_increasing_in_z_decreasing_in_k():
    k = 3.0
    ws = [(1.0 - _c(z)) ** k for z in np.linspace(0.0, 5.0, 20)]
    assert all(a < b for a, b in zip(ws, ws[1:]))
    c = 0.3  # fixed confidence in (0,1): higher k shrinks the weight
    assert (1.0 - c) ** 4 < (1.0 - c) ** 3 < (1.0 - c) ** 2


@given(st.floats(min_value=0.0, max_value=1.0), st.floats(min_value=0.5, max_value=8.0))
@settings(max_examples=50)
def test_weight_range_property(c, k):
    w = (1.0 - c) ** k
    assert 0.0 <= w <= 1.0
    # strictness needs 1 - c representably below 1; under half an ulp
    # of 1.0 the subtraction rounds back to 1.0 exactly
    if c > 1e-15:
        assert w < 1.0


def test_domain_weights_validates_consistency():
    c = np.array([0.2, 0.9])
    DomainWeights(domain_id=0, confidence=c, weights=(1 - c) ** 2.0, k=2.0)
    with pytest.raises(ValueError):
        DomainWeights(domain_id=0, confidence=c, weights=(1 - c) ** 3.0, k=2.0)
    with pytest.raises(ValueError):
        DomainWeights(domain_id=0, confidence=np.array([1.5]),
                      weights=np.array([0.0]), k=1.0)
    with pytest.raises(ValueError):
        DomainWeights(domain_id=0, confidence=c, weights=(1 - c) ** 2.0, k=-1.0)


# ---------------------------------------------------------------------------
# Per-domain aggregation
# ---------------------------------------------------------------------------


def test_compute_domain_weights_independent_domains():
    rng = np.random.default_rng(4)
    n, p = 30, 5
    values = rng.normal(size=(n, p))
    means = np.zeros((n, p))
    variances = np.ones((n, p))
    domains = np.array([0] * 15 + [1] * 15)
    # domain 1's observations sit far in the tails for feature 2
    values[15:, 2] += 8.0

    both = compute_domain_weights(values, domains, means, variances, k=3.0)
    only0 = compute_domain_weights(values[:15], domains[:15], means[:15],
                                   variances[:15], k=3.0)
    np.testing.assert_array_equal(both[0].confidence, only0[0].confidence)
    assert both[1].weights[2] > 0.99
    assert both[0].weights[2] < both[1].weights[2]


def test_compute_domain_weights_keys_and_k():
    values = np.zeros((4, 3))
    domains = np.array([0, 1, 1, 0])
    out = compute_domain_weights(values, domains, np.zeros((4, 3)),
                                 np.ones((4, 3)), k=2.5)
    assert sorted(out) == [0, 1]
    assert out[0].k == 2.5
    # perfect match everywhere: confidence 1, weights 0
    np.testing.assert_allclose(out[0].confidence, 1.0)
    np.testing.assert_allclose(out[0].weights, 0.0)
