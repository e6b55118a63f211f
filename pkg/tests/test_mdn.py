"""Mixture density network tests.

The analytic gradient is the heart of the model, so it gets a finite
difference oracle; everything else checks the estimator contract.
"""

import math

import numpy as np
import pytest
from sklearn.base import clone

from densindex import (
    DataError,
    FeatureKey,
    MixtureDensityEnsemble,
    MixtureDensityNetwork,
    load_model,
    save_model,
    scenario_config,
    generate,
)
from densindex.mdn import ModelLayout, encode_dataset, init_params, nll, nll_and_grads


@pytest.fixture(scope="module")
def small_data():
    config = scenario_config("standard", n_weeks=20, sales_per_week=4.0)
    dataset, _ = generate(config, seed=3)
    return dataset, config.registry()


@pytest.fixture(scope="module")
def fitted(small_data):
    dataset, registry = small_data
    model = MixtureDensityNetwork(n_components=3, hidden_dim=16, embed_dim=4,
                                  n_epochs=8, seed=0)
    return model.fit(dataset, registry)


def test_gradients_match_finite_differences(small_data):
    dataset, registry = small_data
    layout = ModelLayout.build(dataset, registry, resolve_bedrooms=True,
                               resolve_land_band=True, embed_dim=3,
                               hidden_dim=6, n_components=2)
    sub = dataset.subset(np.arange(40))
    enc = encode_dataset(layout, sub)
    rng = np.random.default_rng(0)
    params = init_params(layout, rng, enc["y"])
    _, grads = nll_and_grads(params, layout, enc)

    eps = 1e-6
    worst = 0.0
    check_rng = np.random.default_rng(1)
    for name, g in grads.items():
        flat = params[name].reshape(-1)
        gflat = g.reshape(-1)
        picks = check_rng.choice(flat.size, size=min(12, flat.size), replace=False)
        for idx in picks:
            keep = flat[idx]
            flat[idx] = keep + eps
            hi = nll(params, layout, enc)
            flat[idx] = keep - eps
            lo = nll(params, layout, enc)
            flat[idx] = keep
            fd = (hi - lo) / (2 * eps)
            denom = max(abs(fd), abs(gflat[idx]), 1e-8)
            worst = max(worst, abs(fd - gflat[idx]) / denom)
    assert worst < 1e-4


def test_single_gaussian_nll_hand_value():
    # K=1 head forced to mu=y, sigma^2=1 gives NLL = 0.5 ln(2 pi) per point
    from densindex import GaussianMixture
    mix = GaussianMixture([1.0], [13.0], [1.0])
    assert -mix.logpdf(13.0) == pytest.approx(0.5 * math.log(2 * math.pi), rel=1e-12)
    assert 0.5 * math.log(2 * math.pi) == pytest.approx(0.9189385, abs=1e-7)


def test_dataset_nll_matches_mixture_logpdf(fitted, small_data):
    dataset, _ = small_data
    sub = dataset.subset(np.arange(60))
    reported = fitted.dataset_nll(sub)
    # independent path: query the mixtures and score with GaussianMixture
    per_record = []
    for i in range(len(sub)):
        mix = fitted.predict_mixtures([sub.key_of(i)], [int(sub.week[i])])[0]
        per_record.append(-mix.logpdf(sub.log_price[i]))
    assert reported == pytest.approx(float(np.mean(per_record)), rel=1e-10)


def test_fit_learns(fitted):
    assert fitted.loss_curve_[-1] < fitted.loss_curve_[0]
    assert np.isfinite(fitted.train_nll_)
    assert fitted.n_records_ > 0


def test_predict_shapes_and_floor(fitted):
    mixes = fitted.predict_mixtures(
        [FeatureKey("R0", "house"), FeatureKey("R1", "unit")], [5, 10])
    assert len(mixes) == 2
    for mix in mixes:
        assert mix.n_components == 3
        assert mix.weights.sum() == pytest.approx(1.0)
        assert np.all(mix.variances >= 1e-6)
    mix = fitted.predict_density(FeatureKey("R0", "house"), 5)
    dens = mix.pdf(np.array([12.5, 13.0, 13.5]))
    assert dens.shape == (3,) and np.all(dens > 0)


def test_week_clipping_beyond_span(fitted, small_data):
    # trend index clips to the observed span; week of year tracks the real
    # calendar, so stepping a whole year past the end changes nothing
    dataset, _ = small_data
    lo, hi = dataset.week_range()
    key = FeatureKey("R0", "house")
    inside = fitted.predict_mixtures([key], [hi])[0]
    beyond = fitted.predict_mixtures([key], [hi + 52])[0]
    assert np.array_equal(inside.means, beyond.means)
    before = fitted.predict_mixtures([key], [lo - 52])[0]
    at_lo = fitted.predict_mixtures([key], [lo])[0]
    assert np.array_equal(before.means, at_lo.means)


def test_unknown_region_rejected(fitted):
    with pytest.raises(DataError):
        fitted.predict_mixtures([FeatureKey("nowhere", "house")], [5])


def test_determinism(small_data):
    dataset, registry = small_data
    kwargs = dict(n_components=2, hidden_dim=8, embed_dim=3, n_epochs=3, seed=7)
    a = MixtureDensityNetwork(**kwargs).fit(dataset, registry)
    b = MixtureDensityNetwork(**kwargs).fit(dataset, registry)
    assert a.train_nll_ == b.train_nll_
    for name in a.params_:
        assert np.array_equal(a.params_[name], b.params_[name])
    c = MixtureDensityNetwork(**{**kwargs, "seed": 8}).fit(dataset, registry)
    assert c.train_nll_ != a.train_nll_


def test_sklearn_contract(fitted):
    params = fitted.get_params()
    assert params["n_components"] == 3
    fresh = clone(fitted)
    assert fresh.get_params()["hidden_dim"] == 16
    assert not hasattr(fresh, "params_")
    fitted2 = MixtureDensityNetwork().set_params(n_epochs=1, n_components=2)
    assert fitted2.n_epochs == 1


def test_network_round_trip(fitted, tmp_path, small_data):
    dataset, _ = small_data
    payload = fitted.to_dict()
    again = MixtureDensityNetwork.from_dict(payload)
    key, week = FeatureKey("R2", "house"), 7
    a = fitted.predict_mixtures([key], [week])[0]
    b = again.predict_mixtures([key], [week])[0]
    assert np.array_equal(a.means, b.means)
    assert np.array_equal(a.weights, b.weights)
    assert np.array_equal(a.variances, b.variances)

    path = tmp_path / "model.json"
    save_model(fitted, path)
    loaded = load_model(path)
    assert isinstance(loaded, MixtureDensityNetwork)
    c = loaded.predict_mixtures([key], [week])[0]
    assert np.array_equal(a.means, c.means)
    assert loaded.dataset_nll(dataset.subset(np.arange(30))) == pytest.approx(
        fitted.dataset_nll(dataset.subset(np.arange(30))), rel=1e-12)


def test_fit_rejects_empty(small_data):
    dataset, registry = small_data
    with pytest.raises(DataError):
        MixtureDensityNetwork(n_epochs=1).fit(dataset.subset(np.array([], dtype=int)),
                                              registry)


def test_ensemble_pools_members(small_data):
    dataset, registry = small_data
    base = MixtureDensityNetwork(n_components=2, hidden_dim=8, embed_dim=3,
                                 n_epochs=3)
    ens = MixtureDensityEnsemble(base, n_members=3, seed=5).fit(dataset, registry)
    assert len(ens.members_) == 3
    seeds = [m.seed for m in ens.members_]
    assert seeds == [5, 6, 7]
    key, week = FeatureKey("R1", "house"), 4
    pooled = ens.predict_mixtures([key], [week])[0]
    assert pooled.n_components == 3 * 2
    # equal weight pooling: pdf is the average of member pdfs
    x = np.linspace(12.0, 14.0, 9)
    member_pdf = np.mean(
        [m.predict_mixtures([key], [week])[0].pdf(x) for m in ens.members_], axis=0)
    assert np.allclose(pooled.pdf(x), member_pdf, rtol=1e-12)


def test_ensemble_round_trip(small_data, tmp_path):
    dataset, registry = small_data
    base = MixtureDensityNetwork(n_components=2, hidden_dim=8, embed_dim=3,
                                 n_epochs=2)
    ens = MixtureDensityEnsemble(base, n_members=2, seed=1).fit(dataset, registry)
    path = tmp_path / "ens.json"
    save_model(ens, path)
    loaded = load_model(path)
    assert isinstance(loaded, MixtureDensityEnsemble)
    key, week = FeatureKey("R0", "unit"), 9
    a = ens.predict_mixtures([key], [week])[0]
    b = loaded.predict_mixtures([key], [week])[0]
    assert np.array_equal(a.means, b.means)
    assert np.array_equal(a.weights, b.weights)
    sub = dataset.subset(np.arange(40))
    assert loaded.dataset_nll(sub) == pytest.approx(ens.dataset_nll(sub), rel=1e-12)


def test_ensemble_determinism(small_data):
    dataset, registry = small_data
    base = MixtureDensityNetwork(n_components=2, hidden_dim=8, embed_dim=3,
                                 n_epochs=2)
    a = MixtureDensityEnsemble(base, n_members=2, seed=3).fit(dataset, registry)
    b = MixtureDensityEnsemble(clone(base), n_members=2, seed=3).fit(dataset, registry)
    key, week = FeatureKey("R3", "house"), 11
    ma = a.predict_mixtures([key], [week])[0]
    mb = b.predict_mixtures([key], [week])[0]
    assert np.array_equal(ma.means, mb.means)


def test_resolved_keys_round_trip(small_data):
    dataset, registry = small_data
    model = MixtureDensityNetwork(n_components=2, hidden_dim=8, embed_dim=3,
                                  n_epochs=2, resolve_bedrooms=True).fit(
        dataset, registry)
    beds = sorted(set(dataset.bedrooms[np.isfinite(dataset.bedrooms)]))
    key = FeatureKey("R0", "house", bedrooms=beds[0])
    mix = model.predict_mixtures([key], [5])[0]
    assert np.isfinite(mix.mean_log())
    # a resolved model insists on resolved query keys
    with pytest.raises(DataError):
        model.predict_mixtures([FeatureKey("R0", "house")], [5])
