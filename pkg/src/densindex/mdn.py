"""Mixture density network over (feature key, week) cells.

The network maps concatenated categorical embeddings (week index, week of
year, region, neighbourhood average of adjacent region embeddings, property
type, optionally bedroom count and land band) through three tanh layers to
the parameters of a Gaussian mixture in log price: softmax weights, linear
means and softplus variances floored at 1e-6.

Forward pass, analytic negative-log-likelihood gradients and the Adam loop
are written directly in numpy so that the computation is a plain function
of (parameters, batch) with no hidden state, which keeps retraining
bit-reproducible for a fixed seed.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit
from sklearn.base import BaseEstimator, clone
from sklearn.utils.validation import check_is_fitted
from joblib import Parallel, delayed
from threadpoolctl import threadpool_limits

from .data import (
    PROPERTY_TYPES,
    WEEKS_PER_YEAR,
    FeatureKey,
    RegionRegistry,
    SalesDataset,
)
from .errors import DataError, NumericalError
from .mixture import VARIANCE_FLOOR, GaussianMixture

logger = logging.getLogger(__name__)

_DENSE_WEIGHTS = ("W1", "W2", "W3", "Wo")  # the only decayed parameters

__all__ = [
    "ModelLayout",
    "MixtureDensityNetwork",
    "MixtureDensityEnsemble",
    "encode_dataset",
    "init_params",
    "nll",
    "nll_and_grads",
    "save_model",
    "load_model",
]


@dataclass(frozen=True)
class ModelLayout:
    """Vocabulary and wiring of the network input vector."""

    week_min: int
    week_max: int
    regions: tuple
    neighbor_rows: tuple       # row-normalised adjacency, tuple-of-tuples for hashability
    prop_types: tuple
    bed_values: tuple | None
    band_values: tuple | None
    embed_dim: int
    hidden_dim: int
    n_components: int

    @property
    def n_weeks(self) -> int:
        return self.week_max - self.week_min + 1

    @property
    def n_blocks(self) -> int:
        # week, week-of-year, region, neighbourhood, prop type, then optionals
        return 5 + (self.bed_values is not None) + (self.band_values is not None)

    @property
    def input_dim(self) -> int:
        return self.embed_dim * self.n_blocks

    @property
    def neighbor_matrix(self) -> np.ndarray:
        return np.asarray(self.neighbor_rows, dtype=float)

    def region_index(self) -> dict:
        return {r: i for i, r in enumerate(self.regions)}

    @classmethod
    def build(cls, dataset: SalesDataset, registry: RegionRegistry,
              resolve_bedrooms: bool, resolve_land_band: bool,
              embed_dim: int, hidden_dim: int, n_components: int) -> "ModelLayout":
        if len(dataset) == 0:
            raise DataError("cannot build a model layout from an empty dataset")
        unknown = sorted({r for r in dataset.region if r not in registry})
        if unknown:
            raise DataError(f"dataset regions missing from registry: {unknown}")
        week_min, week_max = dataset.week_range()
        regions = tuple(registry.regions)
        nm = registry.neighbor_matrix(regions)
        bed_values = None
        if resolve_bedrooms:
            if np.isnan(dataset.bedrooms).any():
                raise DataError("resolve_bedrooms requires a bedroom count on every record")
            bed_values = tuple(sorted({int(b) for b in dataset.bedrooms}))
        band_values = None
        if resolve_land_band:
            if np.isnan(dataset.log_land_area).any():
                raise DataError("resolve_land_band requires a land area on every record")
            band_values = tuple(sorted({int(b) for b in dataset.land_band}))
        return cls(week_min, week_max, regions, tuple(map(tuple, nm)), tuple(PROPERTY_TYPES),
                   bed_values, band_values, embed_dim, hidden_dim, n_components)

    def to_dict(self) -> dict:
        return {
            "week_min": self.week_min,
            "week_max": self.week_max,
            "regions": list(self.regions),
            "neighbor_rows": [list(row) for row in self.neighbor_rows],
            "prop_types": list(self.prop_types),
            "bed_values": None if self.bed_values is None else list(self.bed_values),
            "band_values": None if self.band_values is None else list(self.band_values),
            "embed_dim": self.embed_dim,
            "hidden_dim": self.hidden_dim,
            "n_components": self.n_components,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "ModelLayout":
        return cls(
            week_min=int(payload["week_min"]),
            week_max=int(payload["week_max"]),
            regions=tuple(payload["regions"]),
            neighbor_rows=tuple(tuple(row) for row in payload["neighbor_rows"]),
            prop_types=tuple(payload["prop_types"]),
            bed_values=None if payload["bed_values"] is None else tuple(payload["bed_values"]),
            band_values=None if payload["band_values"] is None else tuple(payload["band_values"]),
            embed_dim=int(payload["embed_dim"]),
            hidden_dim=int(payload["hidden_dim"]),
            n_components=int(payload["n_components"]),
        )


# -- encoding -------------------------------------------------------------------


def _categorical_index(values, vocab: dict, what: str) -> np.ndarray:
    out = np.empty(len(values), dtype=np.int64)
    for i, v in enumerate(values):
        try:
            out[i] = vocab[v]
        except KeyError:
            raise DataError(f"{what} {v!r} not in model vocabulary") from None
    return out


def encode_dataset(layout: ModelLayout, dataset: SalesDataset) -> dict:
    """Dataset columns as index arrays ready for the forward pass.

    Weeks are clipped onto the trained span, so querying slightly outside
    it reuses the boundary week embedding.
    """
    t = np.clip(dataset.week - layout.week_min, 0, layout.n_weeks - 1)
    enc = {
        "t": t.astype(np.int64),
        "woy": ((dataset.week % WEEKS_PER_YEAR)).astype(np.int64),
        "r": _categorical_index(dataset.region, layout.region_index(), "region"),
        "p": _categorical_index(dataset.prop_type,
                                {p: i for i, p in enumerate(layout.prop_types)}, "prop type"),
        "y": dataset.log_price.astype(float),
    }
    if layout.bed_values is not None:
        if np.isnan(dataset.bedrooms).any():
            raise DataError("model resolves bedrooms but records lack them")
        vocab = {v: i for i, v in enumerate(layout.bed_values)}
        enc["bed"] = _categorical_index([int(b) for b in dataset.bedrooms], vocab, "bedroom count")
    if layout.band_values is not None:
        if np.isnan(dataset.log_land_area).any():
            raise DataError("model resolves land bands but records lack land area")
        vocab = {v: i for i, v in enumerate(layout.band_values)}
        enc["band"] = _categorical_index([int(b) for b in dataset.land_band], vocab, "land band")
    return enc


def encode_cells(layout: ModelLayout, keys, weeks) -> dict:
    """Encode bare (key, week) queries (no observed prices)."""
    keys = list(keys)
    weeks = np.asarray(weeks, dtype=np.int64)
    if len(keys) != weeks.size:
        raise ValueError("need one key per week entry")
    region_index = layout.region_index()
    prop_index = {p: i for i, p in enumerate(layout.prop_types)}
    t = np.clip(weeks - layout.week_min, 0, layout.n_weeks - 1)
    enc = {
        "t": t,
        "woy": (weeks % WEEKS_PER_YEAR).astype(np.int64),
        "r": _categorical_index([k.region for k in keys], region_index, "region"),
        "p": _categorical_index([k.prop_type for k in keys], prop_index, "prop type"),
    }
    if layout.bed_values is not None:
        vocab = {v: i for i, v in enumerate(layout.bed_values)}
        bad = [k for k in keys if k.bedrooms is None]
        if bad:
            raise DataError("model resolves bedrooms; query keys must carry a bedroom count")
        enc["bed"] = _categorical_index([k.bedrooms for k in keys], vocab, "bedroom count")
    if layout.band_values is not None:
        vocab = {v: i for i, v in enumerate(layout.band_values)}
        if any(k.land_band is None for k in keys):
            raise DataError("model resolves land bands; query keys must carry a land band")
        enc["band"] = _categorical_index([k.land_band for k in keys], vocab, "land band")
    return enc


# -- parameters -----------------------------------------------------------------


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def _softplus(x):
    return np.logaddexp(0.0, x)


def _softplus_inv(v: float) -> float:
    # inverse of log(1 + e^x) for positive v
    v = max(float(v), 1e-10)
    return v + math.log1p(-math.exp(-v))


def init_params(layout: ModelLayout, rng: np.random.Generator, y: np.ndarray) -> dict:
    """Data-dependent initialisation.

    Embeddings start small and uniform; dense layers Glorot. The mean head
    biases are spread across quantiles of the observed log prices and the
    variance head starts near the pooled variance, so the first forward
    pass already covers the support of the data.
    """
    E, H, K, D = layout.embed_dim, layout.hidden_dim, layout.n_components, layout.input_dim
    params = {
        "emb_week": rng.uniform(-0.05, 0.05, size=(layout.n_weeks, E)),
        "emb_woy": rng.uniform(-0.05, 0.05, size=(WEEKS_PER_YEAR, E)),
        "emb_region": rng.uniform(-0.05, 0.05, size=(len(layout.regions), E)),
        "emb_prop": rng.uniform(-0.05, 0.05, size=(len(layout.prop_types), E)),
    }
    if layout.bed_values is not None:
        params["emb_bed"] = rng.uniform(-0.05, 0.05, size=(len(layout.bed_values), E))
    if layout.band_values is not None:
        params["emb_band"] = rng.uniform(-0.05, 0.05, size=(len(layout.band_values), E))
    params["W1"] = _glorot(rng, D, H)
    params["b1"] = np.zeros(H)
    params["W2"] = _glorot(rng, H, H)
    params["b2"] = np.zeros(H)
    params["W3"] = _glorot(rng, H, H)
    params["b3"] = np.zeros(H)
    params["Wo"] = _glorot(rng, H, 3 * K)
    bo = np.zeros(3 * K)
    if K == 1:
        bo[K:2 * K] = np.quantile(y, [0.5])
    else:
        bo[K:2 * K] = np.quantile(y, np.linspace(0.08, 0.92, K))
    init_var = max(float(np.var(y)), 1e-3)
    bo[2 * K:] = _softplus_inv(init_var)
    params["bo"] = bo
    return params


# -- forward / backward -----------------------------------------------------------


def _forward(params: dict, layout: ModelLayout, enc: dict, t=None, woy=None):
    """Forward pass; returns (alpha, log_alpha, mu, var, cache)."""
    t = enc["t"] if t is None else t
    woy = enc["woy"] if woy is None else woy
    r, p = enc["r"], enc["p"]
    nm = layout.neighbor_matrix @ params["emb_region"]
    parts = [params["emb_week"][t], params["emb_woy"][woy],
             params["emb_region"][r], nm[r], params["emb_prop"][p]]
    if layout.bed_values is not None:
        parts.append(params["emb_bed"][enc["bed"]])
    if layout.band_values is not None:
        parts.append(params["emb_band"][enc["band"]])
    x = np.concatenate(parts, axis=1)
    h1 = np.tanh(x @ params["W1"] + params["b1"])
    h2 = np.tanh(h1 @ params["W2"] + params["b2"])
    h3 = np.tanh(h2 @ params["W3"] + params["b3"])
    o = h3 @ params["Wo"] + params["bo"]
    K = layout.n_components
    z = o[:, :K]
    mu = o[:, K:2 * K]
    raw = o[:, 2 * K:]
    zs = z - z.max(axis=1, keepdims=True)
    log_alpha = zs - np.log(np.exp(zs).sum(axis=1, keepdims=True))
    var = _softplus(raw) + VARIANCE_FLOOR
    cache = (x, h1, h2, h3, mu, raw, var, log_alpha, t, woy, r, p,
             enc.get("bed"), enc.get("band"))
    return np.exp(log_alpha), log_alpha, mu, var, cache


def _loss_terms(log_alpha, mu, var, y):
    log_phi = -0.5 * (np.log(2.0 * np.pi * var) + (y[:, None] - mu) ** 2 / var)
    joint = log_alpha + log_phi
    m = joint.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(joint - m).sum(axis=1))
    return joint, lse


def nll(params: dict, layout: ModelLayout, enc: dict, t=None, woy=None) -> float:
    """Mean negative log likelihood of the encoded records."""
    _, log_alpha, mu, var, _ = _forward(params, layout, enc, t=t, woy=woy)
    _, lse = _loss_terms(log_alpha, mu, var, enc["y"])
    return float(-lse.mean())


def nll_and_grads(params: dict, layout: ModelLayout, enc: dict, t=None, woy=None):
    """Loss plus analytic gradients for every parameter array.

    Gradients follow the standard mixture responsibility form: with
    gamma_k the posterior weight of component k for a record,
    d loss / d logit_k = (alpha_k - gamma_k) / B,
    d loss / d mu_k = gamma_k (mu_k - y) / var_k / B, and the variance
    derivative is chained through the softplus head.
    """
    y = enc["y"]
    B = y.size
    alpha, log_alpha, mu, var, cache = _forward(params, layout, enc, t=t, woy=woy)
    (x, h1, h2, h3, _, raw, _, _, t_used, woy_used, r, p, bed, band) = cache
    joint, lse = _loss_terms(log_alpha, mu, var, y)
    loss = float(-lse.mean())

    gamma = np.exp(joint - lse[:, None])
    dz = (alpha - gamma) / B
    diff = mu - y[:, None]
    dmu = gamma * diff / var / B
    dvar = 0.5 * gamma * (1.0 / var - diff**2 / var**2) / B
    draw = dvar * expit(raw)
    do = np.concatenate([dz, dmu, draw], axis=1)

    grads = {"Wo": h3.T @ do, "bo": do.sum(axis=0)}
    dh3 = do @ params["Wo"].T
    dpre3 = dh3 * (1.0 - h3**2)
    grads["W3"] = h2.T @ dpre3
    grads["b3"] = dpre3.sum(axis=0)
    dh2 = dpre3 @ params["W3"].T
    dpre2 = dh2 * (1.0 - h2**2)
    grads["W2"] = h1.T @ dpre2
    grads["b2"] = dpre2.sum(axis=0)
    dh1 = dpre2 @ params["W2"].T
    dpre1 = dh1 * (1.0 - h1**2)
    grads["W1"] = x.T @ dpre1
    grads["b1"] = dpre1.sum(axis=0)
    dx = dpre1 @ params["W1"].T

    E = layout.embed_dim
    blocks = iter(range(layout.n_blocks))

    def _block():
        i = next(blocks)
        return dx[:, i * E:(i + 1) * E]

    g = np.zeros_like(params["emb_week"])
    np.add.at(g, t_used, _block())
    grads["emb_week"] = g
    g = np.zeros_like(params["emb_woy"])
    np.add.at(g, woy_used, _block())
    grads["emb_woy"] = g
    g = np.zeros_like(params["emb_region"])
    np.add.at(g, r, _block())
    scatter = np.zeros_like(params["emb_region"])
    np.add.at(scatter, r, _block())
    # the neighbourhood block reaches region embeddings through the
    # row-normalised adjacency, so its gradient flows back through A^T
    g += layout.neighbor_matrix.T @ scatter
    grads["emb_region"] = g
    g = np.zeros_like(params["emb_prop"])
    np.add.at(g, p, _block())
    grads["emb_prop"] = g
    if layout.bed_values is not None:
        g = np.zeros_like(params["emb_bed"])
        np.add.at(g, bed, _block())
        grads["emb_bed"] = g
    if layout.band_values is not None:
        g = np.zeros_like(params["emb_band"])
        np.add.at(g, band, _block())
        grads["emb_band"] = g
    return loss, grads


# -- estimators -------------------------------------------------------------------


class MixtureDensityNetwork(BaseEstimator):
    """Granular log-price density estimator.

    Parameters
    ----------
    n_components : int
        Mixture components emitted per (key, week) cell.
    embed_dim, hidden_dim : int
        Embedding width per categorical input and hidden layer width.
    n_epochs, batch_size, learning_rate : training loop controls.
        The learning rate follows a cosine schedule down to
        ``learning_rate * lr_floor_fraction``.
    weight_decay : float
        Decoupled decay applied to the dense weight matrices only.
    jitter_weeks : float
        Std deviation of the Gaussian week jitter, redrawn each epoch,
        rounded to whole weeks and clamped to the observed range. Zero
        disables it.
    resolve_bedrooms, resolve_land_band : bool
        Grow the feature key with bedroom count / land band.
    seed : int
        Seeds initialisation, shuffling and jitter.
    """

    def __init__(self, n_components: int = 8, embed_dim: int = 10, hidden_dim: int = 64,
                 n_epochs: int = 60, batch_size: int = 256, learning_rate: float = 5e-3,
                 lr_floor_fraction: float = 0.01, weight_decay: float = 1e-5,
                 jitter_weeks: float = 2.0, resolve_bedrooms: bool = False,
                 resolve_land_band: bool = False, seed: int = 0):
        self.n_components = n_components
        self.embed_dim = embed_dim
        self.hidden_dim = hidden_dim
        self.n_epochs = n_epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.lr_floor_fraction = lr_floor_fraction
        self.weight_decay = weight_decay
        self.jitter_weeks = jitter_weeks
        self.resolve_bedrooms = resolve_bedrooms
        self.resolve_land_band = resolve_land_band
        self.seed = seed

    def _validate(self):
        if self.n_components < 1:
            raise ValueError("n_components must be at least 1")
        if self.n_epochs < 1 or self.batch_size < 1:
            raise ValueError("n_epochs and batch_size must be positive")
        if self.learning_rate <= 0 or not 0 < self.lr_floor_fraction <= 1:
            raise ValueError("learning_rate must be positive and lr_floor_fraction in (0, 1]")
        if self.weight_decay < 0 or self.jitter_weeks < 0:
            raise ValueError("weight_decay and jitter_weeks must be non-negative")

    def fit(self, dataset: SalesDataset, registry: RegionRegistry) -> "MixtureDensityNetwork":
        """Train on every record of ``dataset``; returns self."""
        self._validate()
        layout = ModelLayout.build(
            dataset, registry, self.resolve_bedrooms, self.resolve_land_band,
            self.embed_dim, self.hidden_dim, self.n_components)
        enc = encode_dataset(layout, dataset)
        y = enc["y"]
        n = y.size
        rng = np.random.default_rng(self.seed)
        params = init_params(layout, rng, y)

        state_m = {k: np.zeros_like(v) for k, v in params.items()}
        state_v = {k: np.zeros_like(v) for k, v in params.items()}
        beta1, beta2, eps = 0.9, 0.999, 1e-8
        steps_per_epoch = math.ceil(n / self.batch_size)
        total_steps = self.n_epochs * steps_per_epoch
        lr0 = self.learning_rate
        lr_end = lr0 * self.lr_floor_fraction

        loss_curve = []
        step = 0
        # single-threaded BLAS keeps accumulation order, and therefore the
        # trained parameters, bit-identical across runs
        with threadpool_limits(limits=1):
            for epoch in range(self.n_epochs):
                perm = rng.permutation(n)
                if self.jitter_weeks > 0:
                    jit = np.rint(rng.normal(0.0, self.jitter_weeks, size=n)).astype(np.int64)
                    t_j = np.clip(enc["t"] + jit, 0, layout.n_weeks - 1)
                else:
                    t_j = enc["t"]
                woy_j = (layout.week_min + t_j) % WEEKS_PER_YEAR
                epoch_loss = 0.0
                for start in range(0, n, self.batch_size):
                    idx = perm[start:start + self.batch_size]
                    batch = {k: v[idx] for k, v in enc.items()}
                    lr = lr_end + 0.5 * (lr0 - lr_end) * (1.0 + math.cos(math.pi * step / max(total_steps - 1, 1)))
                    loss, grads = nll_and_grads(params, layout, batch,
                                                t=t_j[idx], woy=woy_j[idx])
                    if not math.isfinite(loss):
                        raise NumericalError(
                            f"non-finite training loss at epoch {epoch}, step {step}")
                    step += 1
                    bias1 = 1.0 - beta1**step
                    bias2 = 1.0 - beta2**step
                    for name, g in grads.items():
                        m = state_m[name]
                        v = state_v[name]
                        m *= beta1
                        m += (1.0 - beta1) * g
                        v *= beta2
                        v += (1.0 - beta2) * g * g
                        update = (m / bias1) / (np.sqrt(v / bias2) + eps)
                        params[name] -= lr * update
                        if name in _DENSE_WEIGHTS and self.weight_decay > 0:
                            params[name] -= lr * self.weight_decay * params[name]
                    epoch_loss += loss * idx.size
                loss_curve.append(epoch_loss / n)
                if epoch % 10 == 0 or epoch == self.n_epochs - 1:
                    logger.debug("epoch %d/%d jittered nll %.4f",
                                 epoch + 1, self.n_epochs, loss_curve[-1])
            final_nll = nll(params, layout, enc)
        if not math.isfinite(final_nll):
            raise NumericalError("non-finite likelihood after training")

        self.layout_ = layout
        self.params_ = params
        self.loss_curve_ = loss_curve
        self.train_nll_ = final_nll
        self.n_records_ = n
        logger.info("trained density network on %d records, train nll %.4f", n, final_nll)
        return self

    # -- prediction --------------------------------------------------------------

    def predict_mixtures(self, keys, weeks) -> list:
        """Densities for parallel lists of keys and weeks."""
        check_is_fitted(self, "params_")
        enc = encode_cells(self.layout_, keys, weeks)
        alpha, _, mu, var, _ = _forward(self.params_, self.layout_, enc)
        return [GaussianMixture(alpha[i], mu[i], var[i]) for i in range(alpha.shape[0])]

    def predict_density(self, key: FeatureKey, week: int) -> GaussianMixture:
        """Density of one (key, week) cell."""
        return self.predict_mixtures([key], [int(week)])[0]

    def dataset_nll(self, dataset: SalesDataset) -> float:
        """Mean negative log likelihood of a dataset under the fitted model."""
        check_is_fitted(self, "params_")
        enc = encode_dataset(self.layout_, dataset)
        return nll(self.params_, self.layout_, enc)

    # -- persistence ---------------------------------------------------------------

    def to_dict(self) -> dict:
        check_is_fitted(self, "params_")
        return {
            "format": "densindex-mdn",
            "version": 1,
            "config": self.get_params(),
            "layout": self.layout_.to_dict(),
            "params": {k: v.tolist() for k, v in self.params_.items()},
            "train_nll": self.train_nll_,
            "loss_curve": list(self.loss_curve_),
            "n_records": self.n_records_,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "MixtureDensityNetwork":
        if payload.get("format") != "densindex-mdn":
            raise DataError(f"not a density network payload: {payload.get('format')!r}")
        if payload.get("version") != 1:
            raise DataError(f"unsupported model version {payload.get('version')!r}")
        model = cls(**payload["config"])
        model.layout_ = ModelLayout.from_dict(payload["layout"])
        model.params_ = {k: np.asarray(v, dtype=float) for k, v in payload["params"].items()}
        model.train_nll_ = float(payload["train_nll"])
        model.loss_curve_ = [float(v) for v in payload["loss_curve"]]
        model.n_records_ = int(payload["n_records"])
        return model


def _fit_member(member, dataset, registry):
    return member.fit(dataset, registry)


class MixtureDensityEnsemble(BaseEstimator):
    """Deep ensemble of density networks pooled with equal weights.

    Parameters
    ----------
    base_estimator : MixtureDensityNetwork, optional
        Template member; cloned with seeds ``seed + 0 .. seed + n_members - 1``.
    n_members : int
        Ensemble size.
    n_jobs : int
        Parallel member training (order-stable gather); 1 trains inline.
    """

    def __init__(self, base_estimator=None, n_members: int = 30, seed: int = 0,
                 n_jobs: int = 1):
        self.base_estimator = base_estimator
        self.n_members = n_members
        self.seed = seed
        self.n_jobs = n_jobs

    def fit(self, dataset: SalesDataset, registry: RegionRegistry) -> "MixtureDensityEnsemble":
        if self.n_members < 1:
            raise ValueError("ensemble needs at least one member")
        base = self.base_estimator if self.base_estimator is not None else MixtureDensityNetwork()
        members = [clone(base).set_params(seed=self.seed + i) for i in range(self.n_members)]
        if self.n_jobs == 1:
            self.members_ = [m.fit(dataset, registry) for m in members]
        else:
            self.members_ = Parallel(n_jobs=self.n_jobs)(
                delayed(_fit_member)(m, dataset, registry) for m in members)
        self.train_nll_ = float(np.mean([m.train_nll_ for m in self.members_]))
        return self

    def predict_mixtures(self, keys, weeks) -> list:
        check_is_fitted(self, "members_")
        per_member = [m.predict_mixtures(keys, weeks) for m in self.members_]
        w = np.ones(self.n_members)
        return [GaussianMixture.pool([pm[i] for pm in per_member], w)
                for i in range(len(per_member[0]))]

    def predict_density(self, key: FeatureKey, week: int) -> GaussianMixture:
        return self.predict_mixtures([key], [int(week)])[0]

    def dataset_nll(self, dataset: SalesDataset) -> float:
        """Mean NLL of records under the pooled ensemble density."""
        check_is_fitted(self, "members_")
        cells = {}
        for i in range(len(dataset)):
            key = dataset.key_of(i, self.members_[0].resolve_bedrooms,
                                 self.members_[0].resolve_land_band)
            cells.setdefault((key, int(dataset.week[i])), []).append(i)
        order = sorted(cells, key=lambda kw: (kw[0], kw[1]))
        mixes = self.predict_mixtures([kw[0] for kw in order], [kw[1] for kw in order])
        total = 0.0
        for (kw, mix) in zip(order, mixes):
            idx = cells[kw]
            total += float(mix.logpdf(dataset.log_price[idx]).sum())
        return -total / len(dataset)

    def to_dict(self) -> dict:
        check_is_fitted(self, "members_")
        config = self.get_params(deep=False)
        config["base_estimator"] = None  # reconstructed from the members
        return {
            "format": "densindex-ensemble",
            "version": 1,
            "config": config,
            "members": [m.to_dict() for m in self.members_],
            "train_nll": self.train_nll_,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "MixtureDensityEnsemble":
        if payload.get("format") != "densindex-ensemble":
            raise DataError(f"not an ensemble payload: {payload.get('format')!r}")
        if payload.get("version") != 1:
            raise DataError(f"unsupported model version {payload.get('version')!r}")
        ensemble = cls(**payload["config"])
        ensemble.members_ = [MixtureDensityNetwork.from_dict(m) for m in payload["members"]]
        if ensemble.members_:
            ensemble.base_estimator = clone(ensemble.members_[0])
        ensemble.train_nll_ = float(payload["train_nll"])
        return ensemble


def save_model(model, path) -> None:
    """Serialise a fitted network or ensemble to JSON, float-exact."""
    with open(path, "w") as fh:
        json.dump(model.to_dict(), fh, sort_keys=True)


def load_model(path):
    """Load a model saved by :func:`save_model`."""
    try:
        with open(path) as fh:
            payload = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read model file {path}: {exc}") from exc
    kind = payload.get("format")
    if kind == "densindex-mdn":
        return MixtureDensityNetwork.from_dict(payload)
    if kind == "densindex-ensemble":
        return MixtureDensityEnsemble.from_dict(payload)
    raise DataError(f"unrecognised model format {kind!r}")
