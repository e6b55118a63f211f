"""Mixture value-type tests.

Expected values come from independent oracles: trapezoid quadrature for
pdf mass and moments, dense grid inversion for quantiles, and Monte Carlo
for price-space moments. Hand values are spot checks computed from the
normal density formula directly.
"""

import json
import math
import time

import numpy as np
import pytest

from densindex import GaussianMixture, VARIANCE_FLOOR


def _random_mixture(rng, max_k=5):
    k = int(rng.integers(1, max_k + 1))
    w = rng.dirichlet(np.ones(k))
    mu = rng.normal(13.0, 1.0, size=k)
    var = rng.uniform(0.005, 0.5, size=k)
    return GaussianMixture(w, mu, var)


def test_standard_normal_peak():
    m = GaussianMixture([1.0], [0.0], [1.0])
    # 1/sqrt(2*pi) evaluated by hand
    assert m.pdf(0.0) == pytest.approx(0.3989422804014327, abs=1e-12)


def test_two_component_hand_value():
    # symmetric two-component case: pdf(2) = phi(2) since both components
    # are two sigma away; phi(2) = exp(-2)/sqrt(2*pi)
    m = GaussianMixture([0.5, 0.5], [0.0, 4.0], [1.0, 1.0])
    expected = math.exp(-2.0) / math.sqrt(2.0 * math.pi)
    assert m.pdf(2.0) == pytest.approx(expected, rel=1e-12)
    assert m.cdf(2.0) == pytest.approx(0.5, abs=1e-12)
    assert m.quantile(0.5) == pytest.approx(2.0, abs=1e-8)


def test_pdf_integrates_to_one():
    rng = np.random.default_rng(101)
    for _ in range(10):
        m = _random_mixture(rng)
        sig = np.sqrt(m.variances.max())
        grid = np.linspace(m.means.min() - 12 * sig, m.means.max() + 12 * sig, 40001)
        mass = np.trapezoid(m.pdf(grid), grid)
        assert mass == pytest.approx(1.0, abs=1e-6)


def test_cdf_matches_quadrature():
    rng = np.random.default_rng(202)
    m = _random_mixture(rng)
    sig = np.sqrt(m.variances.max())
    lo = m.means.min() - 12 * sig
    for y in np.linspace(m.means.min() - sig, m.means.max() + sig, 7):
        grid = np.linspace(lo, y, 200001)
        quad = np.trapezoid(m.pdf(grid), grid)
        assert m.cdf(y) == pytest.approx(quad, abs=1e-7)


def test_quantile_inverts_cdf():
    rng = np.random.default_rng(303)
    for _ in range(10):
        m = _random_mixture(rng)
        ps = rng.uniform(0.001, 0.999, size=20)
        qs = m.quantile(ps)
        assert np.abs(m.cdf(qs) - ps).max() < 1e-8


def test_quantile_matches_grid_inversion():
    # independent inversion: dense grid search for the smallest y with cdf >= p
    m = GaussianMixture([0.3, 0.7], [12.0, 13.5], [0.04, 0.2])
    grid = np.linspace(8.0, 18.0, 2_000_001)
    cdf = m.cdf(grid)
    for p in (0.05, 0.25, 0.5, 0.9, 0.99):
        by_grid = grid[int(np.searchsorted(cdf, p))]
        assert m.quantile(p) == pytest.approx(by_grid, abs=1e-4)


def test_quantile_rejects_endpoints():
    m = GaussianMixture([1.0], [0.0], [1.0])
    for bad in (0.0, 1.0, -0.1, 1.5, float("nan")):
        with pytest.raises(ValueError):
            m.quantile(bad)


def test_moments_against_monte_carlo():
    rng = np.random.default_rng(404)
    m = _random_mixture(rng)
    draws = m.sample(2_000_000, rng)
    mom = m.moments()
    assert mom.mean_log == pytest.approx(draws.mean(), abs=3 * draws.std() / 1414.0)
    assert mom.median_log == pytest.approx(np.median(draws), abs=2e-3)
    prices = np.exp(draws)
    assert mom.mean_price == pytest.approx(prices.mean(), rel=2e-3)
    assert mom.gmean_price == pytest.approx(math.exp(draws.mean()), rel=2e-3)
    assert m.total_variance() == pytest.approx(draws.var(), rel=5e-3)


def test_single_lognormal_mean_price_closed_form():
    # E[exp(Y)] for one component is exp(mu + var/2)
    m = GaussianMixture([1.0], [13.0], [0.04])
    assert m.mean_price() == pytest.approx(math.exp(13.02), rel=1e-12)
    assert m.moments().gmean_price == pytest.approx(math.exp(13.0), rel=1e-12)


def test_mixture_math_is_fast():
    m = GaussianMixture([0.25, 0.25, 0.5], [12.0, 13.0, 14.0], [0.1, 0.05, 0.2])
    start = time.time()
    ps = np.linspace(0.01, 0.99, 99)
    for _ in range(20):
        m.quantile(ps)
        m.moments()
    assert time.time() - start < 1.0


def test_weights_validation():
    with pytest.raises(ValueError):
        GaussianMixture([0.6, 0.6], [0.0, 1.0], [1.0, 1.0])
    with pytest.raises(ValueError):
        GaussianMixture([0.5, -0.5], [0.0, 1.0], [1.0, 1.0])  # negative and wrong sum
    with pytest.raises(ValueError):
        GaussianMixture([0.5, 0.5], [0.0, np.inf], [1.0, 1.0])
    with pytest.raises(ValueError):
        GaussianMixture([0.5, 0.5], [0.0, 1.0], [1.0, 0.0])
    with pytest.raises(ValueError):
        GaussianMixture([], [], [])


def test_variance_floor_applied():
    m = GaussianMixture([1.0], [0.0], [1e-9])
    assert m.variances[0] == VARIANCE_FLOOR


def test_pool_equals_weighted_density_sum():
    rng = np.random.default_rng(505)
    parts = [_random_mixture(rng) for _ in range(4)]
    w = rng.uniform(0.5, 2.0, size=4)
    pooled = GaussianMixture.pool(parts, w)
    ys = rng.normal(13.0, 1.0, size=50)
    direct = sum(wi * p.pdf(ys) for wi, p in zip(w / w.sum(), parts))
    assert np.allclose(pooled.pdf(ys), direct, rtol=1e-12, atol=1e-300)
    assert pooled.n_components == sum(p.n_components for p in parts)


def test_pool_zero_weight_member_dropped():
    a = GaussianMixture([1.0], [0.0], [1.0])
    b = GaussianMixture([1.0], [5.0], [1.0])
    pooled = GaussianMixture.pool([a, b], [1.0, 0.0])
    assert pooled == a
    with pytest.raises(ValueError):
        GaussianMixture.pool([a, b], [0.0, 0.0])
    with pytest.raises(ValueError):
        GaussianMixture.pool([a, b], [1.0, -1.0])


def test_pool_is_aggregation_oracle():
    # pooling two one-component mixtures must reproduce the two-component
    # mixture written down directly
    pooled = GaussianMixture.pool(
        [GaussianMixture([1.0], [12.0], [0.1]), GaussianMixture([1.0], [14.0], [0.3])],
        [0.25, 0.75])
    direct = GaussianMixture([0.25, 0.75], [12.0, 14.0], [0.1, 0.3])
    assert pooled == direct


def test_logpdf_matches_log_of_pdf():
    rng = np.random.default_rng(606)
    m = _random_mixture(rng)
    ys = rng.normal(13.0, 2.0, size=100)
    assert np.allclose(m.logpdf(ys), np.log(m.pdf(ys)), rtol=1e-10)


def test_sampling_matches_cdf_kolmogorov():
    # KS distance between 10k draws and the analytic cdf stays below 0.02
    rng = np.random.default_rng(707)
    m = GaussianMixture([0.6, 0.4], [13.0, 13.8], [0.05, 0.1])
    draws = np.sort(m.sample(10_000, rng))
    emp = np.arange(1, draws.size + 1) / draws.size
    ks = np.abs(m.cdf(draws) - emp).max()
    assert ks < 0.02


def test_json_round_trip_exact():
    rng = np.random.default_rng(808)
    m = _random_mixture(rng)
    again = GaussianMixture.from_json(m.to_json())
    assert again == m
    payload = json.loads(m.to_json())
    assert set(payload) == {"components"}
    assert set(payload["components"][0]) == {"w", "mu", "var"}


def test_mixture_is_immutable():
    m = GaussianMixture([1.0], [0.0], [1.0])
    with pytest.raises(ValueError):
        m.weights[0] = 2.0
