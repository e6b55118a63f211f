"""Ridge benchmark tests: hedonic and repeat-sales index models."""

import math

import numpy as np
import pytest
from scipy import linalg, sparse

from densindex import (
    HedonicIndexModel,
    RepeatSalesIndexModel,
    RepeatSalePair,
    SalesDataset,
    generate,
    scenario_config,
)
from densindex.benchmarks import solve_ridge


def test_solve_ridge_against_dense_solver():
    rng = np.random.default_rng(0)
    X = sparse.csr_matrix(rng.normal(size=(50, 8)))
    y = rng.normal(size=50)
    lam = 0.7
    penalized = np.ones(8, dtype=bool)
    penalized[0] = False
    beta = solve_ridge(X, y, lam, penalized)
    # oracle: direct dense solve of the normal equations
    Xd = X.toarray()
    A = Xd.T @ Xd + lam * np.diag(penalized.astype(float))
    expected = linalg.solve(A, Xd.T @ y)
    assert np.allclose(beta, expected, rtol=1e-8, atol=1e-10)


def _dataset_for_hedonic(n_weeks=20, per_week=30, seed=1):
    """Log prices follow region offset + known weekly steps + bedroom effect."""
    rng = np.random.default_rng(seed)
    deltas = np.concatenate([[0.0], np.cumsum(rng.normal(0.0, 0.02, n_weeks - 1))])
    rows = {k: [] for k in ("dwelling_id", "log_price", "week", "region",
                            "prop_type", "bedrooms", "log_land_area",
                            "bathrooms", "parking")}
    serial = 0
    for week in range(n_weeks):
        for _ in range(per_week):
            region = rng.choice(["A", "B"])
            beds = float(rng.integers(2, 5))
            y = (13.0 + (0.2 if region == "B" else 0.0) + 0.05 * beds
                 + deltas[week] + rng.normal(0.0, 0.01))
            rows["dwelling_id"].append(f"D{serial:05d}")
            serial += 1
            rows["log_price"].append(y)
            rows["week"].append(week)
            rows["region"].append(region)
            rows["prop_type"].append("house")
            rows["bedrooms"].append(beds)
            rows["log_land_area"].append(6.0)
            rows["bathrooms"].append(1.0)
            rows["parking"].append(1.0)
    return SalesDataset(**rows), deltas


def test_hedonic_recovers_known_deltas():
    dataset, deltas = _dataset_for_hedonic()
    model = HedonicIndexModel(ridge_scale=1e-8).fit(dataset)
    fitted = np.array([model.delta_[w] for w in model.weeks_])
    fitted -= fitted[0]
    truth = deltas - deltas[0]
    assert np.max(np.abs(fitted - truth)) < 0.01


def test_hedonic_translation_equivariance():
    dataset, _ = _dataset_for_hedonic(n_weeks=10, per_week=20)
    shifted = SalesDataset(
        dwelling_id=list(dataset.dwelling_id),
        log_price=dataset.log_price + math.log(2.0),  # double every price
        week=dataset.week, region=dataset.region, prop_type=dataset.prop_type,
        bedrooms=dataset.bedrooms, log_land_area=dataset.log_land_area,
        bathrooms=dataset.bathrooms, parking=dataset.parking)
    a = HedonicIndexModel().fit(dataset)
    b = HedonicIndexModel().fit(shifted)
    # time deltas identical, level doubles: the unpenalised intercept absorbs it
    da = np.array([a.delta_[w] for w in a.weeks_])
    db = np.array([b.delta_[w] for w in b.weeks_])
    assert np.allclose(da, db, atol=1e-8)
    sa = a.index_series("weekly")
    sb = b.index_series("weekly")
    assert np.allclose(sb.values, 2.0 * sa.values, rtol=1e-8)


def test_hedonic_index_series_shapes():
    dataset, _ = _dataset_for_hedonic()
    model = HedonicIndexModel().fit(dataset, scope="M/house")
    weekly = model.index_series("weekly")
    assert list(weekly.weeks) == list(model.weeks_)
    assert weekly.kind == "hedonic"
    assert weekly.scope == "M/house"
    assert np.all(weekly.values > 0)
    monthly = model.index_series("monthly")
    assert len(monthly.weeks) < len(weekly.weeks)
    assert set(monthly.weeks) <= set(weekly.weeks)


def test_hedonic_drops_nan_covariate_rows():
    dataset, _ = _dataset_for_hedonic(n_weeks=8, per_week=15)
    beds = dataset.bedrooms.copy()
    beds[:10] = np.nan
    with_nan = SalesDataset(
        dwelling_id=list(dataset.dwelling_id), log_price=dataset.log_price,
        week=dataset.week, region=dataset.region, prop_type=dataset.prop_type,
        bedrooms=beds, log_land_area=dataset.log_land_area,
        bathrooms=dataset.bathrooms, parking=dataset.parking)
    model = HedonicIndexModel().fit(with_nan)
    assert model.n_records_ == len(dataset) - 10


def _pair(d, t1, t2, y1, y2):
    return RepeatSalePair(dwelling_id=d, region="A", prop_type="house",
                          t1=t1, t2=t2, y1=y1, y2=y2)


def test_repeat_sales_two_pair_ols_limit():
    # two dwellings, both sold at weeks 0 and 10 with price ratio 1.2:
    # in the OLS limit H(10)/H(0) = 1.2 exactly
    pairs = [
        _pair("a", 0, 10, 13.0, 13.0 + math.log(1.2)),
        _pair("b", 0, 10, 12.5, 12.5 + math.log(1.2)),
    ]
    model = RepeatSalesIndexModel(ridge_scale=1e-12).fit(pairs=pairs)
    series = model.index_series("weekly")
    ratio = series.value_at(10) / series.value_at(0)
    assert ratio == pytest.approx(1.2, abs=1e-6)


def test_repeat_sales_base_week_is_one():
    pairs = [
        _pair("a", 0, 5, 13.0, 13.1),
        _pair("b", 5, 9, 13.2, 13.4),
        _pair("c", 0, 9, 12.8, 13.0),
    ]
    model = RepeatSalesIndexModel().fit(pairs=pairs)
    assert model.base_week_ == 0
    series = model.index_series("weekly")
    assert series.value_at(0) == pytest.approx(1.0)
    # weeks 1..4 and 6..8 never appear in any pair
    assert 3 in model.missing_weeks_
    assert 7 in model.missing_weeks_
    assert 5 not in model.missing_weeks_


def test_repeat_sales_from_dataset_matches_pairs():
    config = scenario_config("flat", n_weeks=30, sales_per_week=20.0,
                             repeat_fraction=0.5, min_gap_weeks=4)
    dataset, _ = generate(config, seed=6)
    from densindex import pair_repeat_sales
    pairs = pair_repeat_sales(dataset, min_gap_weeks=4)
    a = RepeatSalesIndexModel(min_gap_weeks=4).fit(dataset)
    b = RepeatSalesIndexModel(min_gap_weeks=4).fit(pairs=pairs)
    assert a.weeks_ == b.weeks_
    da = np.array([a.delta_[w] for w in a.weeks_])
    db = np.array([b.delta_[w] for w in b.weeks_])
    assert np.allclose(da, db, atol=1e-12)
    assert a.n_pairs_ == len(pairs)


def test_repeat_sales_flat_market_is_flat():
    config = scenario_config("flat", n_weeks=40, sales_per_week=30.0,
                             repeat_fraction=0.5, min_gap_weeks=4)
    dataset, _ = generate(config, seed=2)
    model = RepeatSalesIndexModel(min_gap_weeks=4).fit(dataset)
    series = model.index_series("weekly")
    # truth index is constant one; sampling noise only
    assert np.max(np.abs(np.log(series.values))) < 0.05


def test_benchmarks_on_trending_scenario():
    config = scenario_config("flat", n_weeks=52, sales_per_week=25.0,
                             repeat_fraction=0.5, min_gap_weeks=6)
    # steady 20 log point climb
    from densindex import TrendSpec
    import dataclasses
    config = dataclasses.replace(config, trend=TrendSpec((0.0, 1.0), (0.0, 0.2)))
    dataset, truth = generate(config, seed=8)
    hed = HedonicIndexModel().fit(dataset)
    rs = RepeatSalesIndexModel(min_gap_weeks=6).fit(dataset)
    true_slope = 0.2 / 51  # log points per week
    for model in (hed, rs):
        series = model.index_series("weekly")
        slope = np.polyfit(series.weeks, np.log(series.values), 1)[0]
        assert slope == pytest.approx(true_slope, rel=0.15)


def test_monthly_sampling_is_mid_month():
    from densindex.indices import monthly_weeks
    from densindex.data import week_start, week_index
    import datetime
    weeks = monthly_weeks(1044, 1070)  # Jan-Jul 2010
    assert len(weeks) == 6
    for w in weeks:
        start = week_start(w)
        days = [start + datetime.timedelta(days=i) for i in range(7)]
        assert any(d.day == 15 for d in days)
    # restricting the span drops months whose mid-week falls outside
    assert monthly_weeks(1044, 1050) == weeks[:2]
