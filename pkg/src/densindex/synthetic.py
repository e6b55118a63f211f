"""Synthetic sales markets with known mixture ground truth.

Each scenario fixes, per (region, prop_type) cell, a small Gaussian
mixture in log price whose component means travel along a region-scaled
piecewise linear trend. Sale counts are Poisson per cell-week, and repeat
sales revisit a dwelling by perturbing its quantile inside the cell
density, so every record (first or repeat sale) is an exact draw from the
declared truth. That makes recovery errors attributable to the estimators
rather than to the fixture.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

import numpy as np

from .data import (
    PROPERTY_TYPES,
    FeatureKey,
    RegionRegistry,
    SalesDataset,
)
from .errors import DataError
from .mixture import VARIANCE_FLOOR, GaussianMixture

__all__ = [
    "TrendSpec",
    "ScenarioConfig",
    "SyntheticGroundTruth",
    "GroundTruthTable",
    "scenario_config",
    "scenario_names",
    "generate",
]


@dataclass(frozen=True)
class TrendSpec:
    """Piecewise linear trend through (fraction of span, log level) knots."""

    fractions: tuple = (0.0, 1.0)
    levels: tuple = (0.0, 0.0)

    def __post_init__(self):
        fr = np.asarray(self.fractions, dtype=float)
        lv = np.asarray(self.levels, dtype=float)
        if fr.shape != lv.shape or fr.ndim != 1 or fr.size < 2:
            raise ValueError("trend needs matching fraction/level knots, at least two")
        if fr[0] != 0.0 or fr[-1] != 1.0 or (np.diff(fr) <= 0).any():
            raise ValueError("trend fractions must increase from 0 to 1")

    def value(self, week, n_weeks: int):
        """Trend level at integer week(s) within a span of ``n_weeks``."""
        frac = np.asarray(week, dtype=float) / max(n_weeks - 1, 1)
        return np.interp(frac, self.fractions, self.levels)


@dataclass(frozen=True)
class ScenarioConfig:
    """Full description of a synthetic market."""

    name: str
    n_regions: int
    n_weeks: int
    prop_types: tuple
    sales_per_week: float            # Poisson mean per (region, prop_type) cell and week
    repeat_fraction: float           # chance a sale gets a later repeat sale
    min_gap_weeks: int
    quantile_noise_sd: float         # sd of the quantile perturbation between sales
    base_log_price: float
    region_offsets: tuple            # per region, added to every component mean
    prop_offsets: dict               # per prop type, same role
    component_weights: tuple
    component_offsets: tuple
    component_variances: tuple
    trend: TrendSpec
    trend_multipliers: tuple         # per region, scales the common trend
    metro: str = "M0"

    def __post_init__(self):
        if self.n_regions < 1 or self.n_weeks < 2:
            raise DataError("scenario needs at least one region and two weeks")
        if len(self.region_offsets) != self.n_regions:
            raise DataError("region_offsets must match n_regions")
        if len(self.trend_multipliers) != self.n_regions:
            raise DataError("trend_multipliers must match n_regions")
        if not self.prop_types or any(p not in PROPERTY_TYPES for p in self.prop_types):
            raise DataError(f"prop_types must be drawn from {PROPERTY_TYPES}")
        if any(p not in self.prop_offsets for p in self.prop_types):
            raise DataError("every prop type needs an offset")
        w = np.asarray(self.component_weights, dtype=float)
        if w.size == 0 or (w <= 0).any() or abs(w.sum() - 1.0) > 1e-8:
            raise DataError("component weights must be positive and sum to one")
        if len(self.component_offsets) != w.size or len(self.component_variances) != w.size:
            raise DataError("component arrays must share one length")
        if any(v < VARIANCE_FLOOR for v in self.component_variances):
            raise DataError("component variances must respect the 1e-6 floor")
        if self.sales_per_week <= 0:
            raise DataError("sales_per_week must be positive")
        if not 0.0 <= self.repeat_fraction <= 1.0:
            raise DataError("repeat_fraction must lie in [0, 1]")
        if self.quantile_noise_sd < 0 or self.min_gap_weeks < 1:
            raise DataError("quantile noise must be >= 0 and min gap >= 1 week")

    @property
    def regions(self) -> list:
        return [f"R{i}" for i in range(self.n_regions)]

    def registry(self) -> RegionRegistry:
        """Chain adjacency R0 - R1 - ... within a single metro."""
        regions = self.regions
        adjacency = {}
        for i, r in enumerate(regions):
            neigh = []
            if i > 0:
                neigh.append(regions[i - 1])
            if i + 1 < len(regions):
                neigh.append(regions[i + 1])
            adjacency[r] = neigh
        return RegionRegistry([(r, self.metro) for r in regions], adjacency)


class SyntheticGroundTruth:
    """Analytic truth behind a scenario: a mixture for every (key, week)."""

    def __init__(self, config: ScenarioConfig):
        self.config = config
        self._region_index = {r: i for i, r in enumerate(config.regions)}
        self._trend_path = config.trend.value(np.arange(config.n_weeks), config.n_weeks)

    def keys(self) -> list:
        return sorted(
            FeatureKey(r, p)
            for r in self.config.regions
            for p in self.config.prop_types
        )

    @property
    def weeks(self) -> np.ndarray:
        return np.arange(self.config.n_weeks)

    def mixture_at(self, key: FeatureKey, week: int) -> GaussianMixture:
        cfg = self.config
        if key.region not in self._region_index:
            raise DataError(f"unknown region {key.region!r} in ground truth lookup")
        if key.prop_type not in cfg.prop_types:
            raise DataError(f"unknown prop type {key.prop_type!r} in ground truth lookup")
        if not 0 <= week < cfg.n_weeks:
            raise DataError(f"week {week} outside scenario span")
        i = self._region_index[key.region]
        level = (
            cfg.base_log_price
            + cfg.region_offsets[i]
            + cfg.prop_offsets[key.prop_type]
            + cfg.trend_multipliers[i] * self._trend_path[week]
        )
        means = level + np.asarray(cfg.component_offsets, dtype=float)
        return GaussianMixture(cfg.component_weights, means, cfg.component_variances)

    def to_dict(self) -> dict:
        weeks = [int(w) for w in self.weeks]
        cells = []
        for key in self.keys():
            mixes = [self.mixture_at(key, w) for w in weeks]
            cells.append({
                "region": key.region,
                "prop_type": key.prop_type,
                "weights": [[float(x) for x in m.weights] for m in mixes],
                "means": [[float(x) for x in m.means] for m in mixes],
                "variances": [[float(x) for x in m.variances] for m in mixes],
            })
        return {"scenario": self.config.name, "weeks": weeks, "cells": cells}

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True)


class GroundTruthTable:
    """Ground truth reloaded from JSON; lookup-only counterpart of the analytic form."""

    def __init__(self, payload: dict):
        try:
            self.scenario = payload.get("scenario", "")
            self._weeks = [int(w) for w in payload["weeks"]]
            index = {}
            for cell in payload["cells"]:
                key = FeatureKey(cell["region"], cell["prop_type"])
                index[key] = (cell["weights"], cell["means"], cell["variances"])
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed ground truth payload: {exc}") from exc
        self._week_pos = {w: i for i, w in enumerate(self._weeks)}
        self._cells = index

    def keys(self) -> list:
        return sorted(self._cells)

    @property
    def weeks(self) -> np.ndarray:
        return np.asarray(self._weeks, dtype=np.int64)

    def mixture_at(self, key: FeatureKey, week: int) -> GaussianMixture:
        if key not in self._cells:
            raise DataError(f"no ground truth cell for {key.label()}")
        if int(week) not in self._week_pos:
            raise DataError(f"no ground truth at week {week}")
        w, mu, var = self._cells[key]
        i = self._week_pos[int(week)]
        return GaussianMixture(w[i], mu[i], var[i])

    @classmethod
    def load(cls, path) -> "GroundTruthTable":
        try:
            with open(path) as fh:
                payload = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read ground truth {path}: {exc}") from exc
        return cls(payload)


def _reflect_unit(x: np.ndarray) -> np.ndarray:
    """Fold the real line into [0, 1] by reflection at both ends.

    The fold is measure preserving for a uniform start, so a perturbed
    quantile is again uniform and repeat sales stay exact draws from the
    destination week's mixture.
    """
    r = np.mod(x, 2.0)
    return np.where(r > 1.0, 2.0 - r, r)


_BEDROOM_VALUES = np.array([2.0, 3.0, 4.0, 5.0])
_BEDROOM_PROBS = np.array([0.2, 0.45, 0.25, 0.1])
_BATHROOM_VALUES = np.array([1.0, 2.0, 3.0])
_BATHROOM_PROBS = np.array([0.45, 0.4, 0.15])
_PARKING_VALUES = np.array([0.0, 1.0, 2.0])
_PARKING_PROBS = np.array([0.25, 0.45, 0.3])


def generate(config: ScenarioConfig, seed: int):
    """Draw a synthetic dataset; returns (dataset, ground truth).

    All randomness flows from one generator seeded with ``seed``, so the
    output is bit-reproducible for a given (config, seed).
    """
    truth = SyntheticGroundTruth(config)
    rng = np.random.default_rng(seed)
    keys = truth.keys()
    last_week = config.n_weeks - 1

    dwelling_serial = 0
    cols = {name: [] for name in (
        "dwelling_id", "log_price", "week", "region", "prop_type",
        "bedrooms", "log_land_area", "bathrooms", "parking")}

    def _emit(dwelling, y, week, key, bed, land, bath, park):
        cols["dwelling_id"].append(dwelling)
        cols["log_price"].append(float(y))
        cols["week"].append(int(week))
        cols["region"].append(key.region)
        cols["prop_type"].append(key.prop_type)
        cols["bedrooms"].append(bed)
        cols["log_land_area"].append(land)
        cols["bathrooms"].append(bath)
        cols["parking"].append(park)

    for key in keys:
        for week in range(config.n_weeks):
            n = int(rng.poisson(config.sales_per_week))
            if n == 0:
                continue
            mix = truth.mixture_at(key, week)
            ys = mix.sample(n, rng)
            beds = rng.choice(_BEDROOM_VALUES, size=n, p=_BEDROOM_PROBS)
            baths = rng.choice(_BATHROOM_VALUES, size=n, p=_BATHROOM_PROBS)
            parks = rng.choice(_PARKING_VALUES, size=n, p=_PARKING_PROBS)
            land_mu = 6.2 if key.prop_type == "house" else 4.9
            lands = rng.normal(land_mu, 0.3, size=n)
            for j in range(n):
                dwelling = f"D{dwelling_serial:07d}"
                dwelling_serial += 1
                _emit(dwelling, ys[j], week, key, beds[j], lands[j], baths[j], parks[j])

    # Repeat pass: revisit a fraction of dwellings at a later week with the
    # dwelling's quantile perturbed, characteristics unchanged.
    n_base = len(cols["log_price"])
    for i in range(n_base):
        if rng.random() >= config.repeat_fraction:
            continue
        t1 = cols["week"][i]
        if t1 + config.min_gap_weeks > last_week:
            continue
        t2 = int(rng.integers(t1 + config.min_gap_weeks, last_week + 1))
        key = FeatureKey(cols["region"][i], cols["prop_type"][i])
        q1 = float(truth.mixture_at(key, t1).cdf(cols["log_price"][i]))
        q2 = float(_reflect_unit(np.asarray(q1 + rng.normal(0.0, config.quantile_noise_sd))))
        q2 = min(max(q2, 1e-12), 1.0 - 1e-12)
        y2 = truth.mixture_at(key, t2).quantile(q2)
        _emit(cols["dwelling_id"][i], y2, t2, key,
              cols["bedrooms"][i], cols["log_land_area"][i],
              cols["bathrooms"][i], cols["parking"][i])

    dataset = SalesDataset(**cols)
    if len(dataset) == 0:
        raise DataError("scenario produced no sales; increase sales_per_week")
    order = np.lexsort((dataset.dwelling_id, dataset.week))
    return dataset.subset(order), truth


def _preset(name: str) -> ScenarioConfig:
    flat = TrendSpec()
    if name == "flat":
        return ScenarioConfig(
            name=name, n_regions=1, n_weeks=50, prop_types=("house",),
            sales_per_week=200.0, repeat_fraction=0.25, min_gap_weeks=8,
            quantile_noise_sd=0.05, base_log_price=13.0,
            region_offsets=(0.0,), prop_offsets={"house": 0.0},
            component_weights=(1.0,), component_offsets=(0.0,),
            component_variances=(0.04,),
            trend=flat, trend_multipliers=(1.0,),
        )
    if name == "standard":
        return ScenarioConfig(
            name=name, n_regions=4, n_weeks=104, prop_types=("house", "unit"),
            sales_per_week=12.0, repeat_fraction=0.35, min_gap_weeks=13,
            quantile_noise_sd=0.08, base_log_price=13.0,
            region_offsets=(-0.15, 0.0, 0.12, 0.25),
            prop_offsets={"house": 0.0, "unit": -0.4},
            component_weights=(0.6, 0.4), component_offsets=(-0.1, 0.15),
            component_variances=(0.03, 0.05),
            trend=TrendSpec((0.0, 0.5, 1.0), (0.0, 0.12, 0.28)),
            trend_multipliers=(0.9, 1.0, 1.1, 1.05),
        )
    if name == "divergent-trends":
        return ScenarioConfig(
            name=name, n_regions=4, n_weeks=120, prop_types=("house",),
            sales_per_week=10.0, repeat_fraction=0.5, min_gap_weeks=13,
            quantile_noise_sd=0.08, base_log_price=13.0,
            region_offsets=(-0.2, 0.0, 0.15, 0.3),
            prop_offsets={"house": 0.0},
            component_weights=(0.65, 0.35), component_offsets=(-0.12, 0.2),
            component_variances=(0.03, 0.06),
            trend=TrendSpec((0.0, 0.4, 1.0), (0.0, 0.18, 0.5)),
            trend_multipliers=(0.3, 0.8, 1.4, 2.0),
        )
    if name == "region-noise":
        return ScenarioConfig(
            name=name, n_regions=5, n_weeks=80, prop_types=("house",),
            sales_per_week=10.0, repeat_fraction=0.5, min_gap_weeks=8,
            quantile_noise_sd=0.15, base_log_price=13.0,
            region_offsets=(-0.6, -0.3, 0.0, 0.3, 0.6),
            prop_offsets={"house": 0.0},
            component_weights=(1.0,), component_offsets=(0.0,),
            component_variances=(0.04,),
            trend=TrendSpec((0.0, 1.0), (0.0, 0.1)),
            trend_multipliers=(1.0, 1.0, 1.0, 1.0, 1.0),
        )
    if name == "right-skew":
        return ScenarioConfig(
            name=name, n_regions=2, n_weeks=60, prop_types=("house",),
            sales_per_week=20.0, repeat_fraction=0.4, min_gap_weeks=8,
            quantile_noise_sd=0.05, base_log_price=13.0,
            region_offsets=(-0.1, 0.1), prop_offsets={"house": 0.0},
            component_weights=(0.75, 0.25), component_offsets=(-0.18, 0.55),
            component_variances=(0.03, 0.08),
            trend=TrendSpec((0.0, 1.0), (0.0, 0.15)),
            trend_multipliers=(1.0, 1.1),
        )
    raise DataError(f"unknown scenario {name!r}; known: {', '.join(scenario_names())}")


def scenario_names() -> list:
    return ["flat", "standard", "divergent-trends", "region-noise", "right-skew"]


def scenario_config(name: str, **overrides) -> ScenarioConfig:
    """A named preset, optionally with fields overridden."""
    cfg = _preset(name)
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    return cfg
