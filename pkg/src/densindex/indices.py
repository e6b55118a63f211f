"""Price index construction from densities and index series plumbing.

An index series is (week, value) pairs in price units tagged with a kind
and a scope label. Density-derived indices read a statistic (median,
geometric mean, mean, quantile) off a sequence of mixtures; the linear
benchmark models produce their series through the same type so every
downstream consumer (projection, calibration, CSV output) is agnostic to
where a curve came from.
"""

from __future__ import annotations

import csv
import datetime
import json
import math
from dataclasses import dataclass

import numpy as np

from .data import FeatureKey, week_start
from .errors import DataError
from .mixture import GaussianMixture

INDEX_CSV_COLUMNS = ("week", "date", "value", "kind", "scope")

__all__ = [
    "IndexSeries",
    "DensitySeries",
    "density_series",
    "pooled_density_series",
    "index_from_density",
    "anchor_series",
    "monthly_weeks",
    "write_index_csv",
    "read_index_csv",
    "dump_density_json",
    "INDEX_CSV_COLUMNS",
]


@dataclass(frozen=True)
class IndexSeries:
    """A price index curve: strictly increasing weeks, positive values."""

    kind: str
    scope: str
    weeks: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        weeks = np.asarray(self.weeks, dtype=np.int64)
        values = np.asarray(self.values, dtype=float)
        if weeks.ndim != 1 or weeks.shape != values.shape or weeks.size == 0:
            raise DataError("index series needs matching, non-empty week/value arrays")
        if (np.diff(weeks) <= 0).any():
            raise DataError("index series weeks must strictly increase")
        if not np.isfinite(values).all() or (values <= 0).any():
            raise DataError("index values must be finite and positive")
        object.__setattr__(self, "weeks", weeks)
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return self.weeks.size

    def covers(self, week: int, max_gap: int = 0) -> bool:
        return bool(np.abs(self.weeks - int(week)).min() <= max_gap)

    def value_at(self, week: int, max_gap: int = 0) -> float:
        """Value at ``week``, bridged to the nearest sample within ``max_gap``.

        Ties between two equally close samples resolve to the earlier week.
        """
        gaps = np.abs(self.weeks - int(week))
        i = int(np.argmin(gaps))  # argmin takes the first, i.e. earlier, week on ties
        if gaps[i] > max_gap:
            raise DataError(
                f"series {self.kind}/{self.scope} has no sample within "
                f"{max_gap} weeks of week {week}")
        return float(self.values[i])

    def ratio(self, t1: int, t2: int, max_gap: int = 0) -> float:
        return self.value_at(t2, max_gap) / self.value_at(t1, max_gap)

    def normalized(self, base_week: int | None = None, max_gap: int = 0) -> "IndexSeries":
        """Series rescaled to 1.0 at ``base_week`` (default: first sample)."""
        base = float(self.values[0]) if base_week is None else self.value_at(base_week, max_gap)
        return IndexSeries(self.kind, self.scope, self.weeks, self.values / base)


def anchor_series(series: IndexSeries, target_value: float, base_week: int,
                  max_gap: int = 0) -> IndexSeries:
    """Rescale a relative curve so it passes through ``target_value`` at ``base_week``.

    Turns a ratio-only index (repeat sales) into price units for
    comparisons against observed sale prices.
    """
    if target_value <= 0:
        raise DataError("anchor value must be positive")
    scale = target_value / series.value_at(base_week, max_gap)
    return IndexSeries(series.kind, series.scope, series.weeks, series.values * scale)


@dataclass(frozen=True)
class DensitySeries:
    """One density per week for a fixed scope."""

    scope: str
    weeks: np.ndarray
    mixtures: tuple
    prop_type: str | None = None

    def __post_init__(self):
        weeks = np.asarray(self.weeks, dtype=np.int64)
        if weeks.size != len(self.mixtures) or weeks.size == 0:
            raise DataError("density series needs one mixture per week")
        if (np.diff(weeks) <= 0).any():
            raise DataError("density series weeks must strictly increase")
        object.__setattr__(self, "weeks", weeks)
        object.__setattr__(self, "mixtures", tuple(self.mixtures))

    def __len__(self) -> int:
        return self.weeks.size

    def mixture_at(self, week: int) -> GaussianMixture:
        pos = np.searchsorted(self.weeks, int(week))
        if pos >= self.weeks.size or self.weeks[pos] != int(week):
            raise DataError(f"density series {self.scope} has no week {week}")
        return self.mixtures[pos]


def density_series(model, key: FeatureKey, weeks, scope: str | None = None) -> DensitySeries:
    """Weekly densities of one feature key under a fitted density model."""
    weeks = np.asarray(weeks, dtype=np.int64)
    mixtures = model.predict_mixtures([key] * weeks.size, weeks)
    label = scope if scope is not None else key.label()
    return DensitySeries(label, weeks, tuple(mixtures), prop_type=key.prop_type)


def pooled_density_series(model, weight_map: dict, weeks, scope: str,
                          prop_type: str | None = None) -> DensitySeries:
    """Fixed-weight aggregate of several keys' densities, week by week.

    ``weight_map`` maps FeatureKey to a non-negative weight; weights are
    renormalised once and held constant across the span so the aggregate
    moves only when the member densities move.
    """
    keys = sorted(k for k, w in weight_map.items() if w > 0)
    if not keys:
        raise DataError("no positively weighted keys to aggregate")
    w = np.asarray([weight_map[k] for k in keys], dtype=float)
    w = w / w.sum()
    weeks = np.asarray(weeks, dtype=np.int64)
    query_keys = [k for k in keys for _ in range(weeks.size)]
    query_weeks = np.tile(weeks, len(keys))
    flat = model.predict_mixtures(query_keys, query_weeks)
    pooled = []
    for j in range(weeks.size):
        members = [flat[i * weeks.size + j] for i in range(len(keys))]
        pooled.append(GaussianMixture.pool(members, w))
    return DensitySeries(scope, weeks, tuple(pooled), prop_type=prop_type)


_STATISTICS = ("median", "gmean", "mean", "quantile")


def index_from_density(series: DensitySeries, statistic: str = "median",
                       p: float | None = None, kind: str | None = None) -> IndexSeries:
    """Read one price statistic off a density series, week by week."""
    if statistic not in _STATISTICS:
        raise DataError(f"unknown statistic {statistic!r}; pick from {_STATISTICS}")
    if statistic == "quantile":
        if p is None or not 0 < p < 1:
            raise DataError("quantile statistic needs p strictly inside (0, 1)")
        values = [math.exp(m.quantile(p)) for m in series.mixtures]
        label = kind or f"d_q{round(100 * p):d}"
    elif statistic == "median":
        values = [math.exp(m.median_log()) for m in series.mixtures]
        label = kind or "d_median"
    elif statistic == "gmean":
        values = [math.exp(m.mean_log()) for m in series.mixtures]
        label = kind or "d_gmean"
    else:
        values = [m.mean_price() for m in series.mixtures]
        label = kind or "d_mean"
    return IndexSeries(label, series.scope, series.weeks, np.asarray(values))


def monthly_weeks(week_lo: int, week_hi: int) -> list:
    """Week indices containing the 15th of each month inside the span."""
    from .data import week_index  # local import keeps module deps one-way

    lo_date = week_start(week_lo)
    hi_date = week_start(week_hi) + datetime.timedelta(days=6)
    out = []
    year, month = lo_date.year, lo_date.month
    while (year, month) <= (hi_date.year, hi_date.month):
        w = week_index(datetime.date(year, month, 15))
        if week_lo <= w <= week_hi:
            out.append(w)
        month += 1
        if month == 13:
            month = 1
            year += 1
    return out


# -- serialisation ----------------------------------------------------------------


def write_index_csv(path, series_list) -> None:
    """All series into one CSV with columns week, date, value, kind, scope."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(INDEX_CSV_COLUMNS)
        for series in series_list:
            for week, value in zip(series.weeks, series.values):
                writer.writerow([
                    int(week),
                    week_start(int(week)).isoformat(),
                    repr(float(value)),
                    series.kind,
                    series.scope,
                ])


def read_index_csv(path) -> list:
    """Inverse of :func:`write_index_csv`; series come back sorted by (kind, scope)."""
    groups = {}
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise DataError(f"cannot read index file {path}: {exc}") from exc
    with fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames) != INDEX_CSV_COLUMNS:
            raise DataError(f"index file {path} has unexpected header {reader.fieldnames}")
        for row in reader:
            try:
                groups.setdefault((row["kind"], row["scope"]), []).append(
                    (int(row["week"]), float(row["value"])))
            except (KeyError, ValueError, TypeError) as exc:
                raise DataError(f"malformed index row {row!r}: {exc}") from exc
    out = []
    for (kind, scope) in sorted(groups):
        rows = sorted(groups[(kind, scope)])
        out.append(IndexSeries(kind, scope,
                               np.asarray([r[0] for r in rows], dtype=np.int64),
                               np.asarray([r[1] for r in rows])))
    return out


def dump_density_json(path, series_list, n_grid: int = 201) -> None:
    """Plot-ready pdf tables: common log-price grid per series, one pdf row per week."""
    payload = {"series": []}
    for series in series_list:
        lo = min(m.quantile(0.001) for m in series.mixtures)
        hi = max(m.quantile(0.999) for m in series.mixtures)
        grid = np.linspace(lo, hi, n_grid)
        payload["series"].append({
            "scope": series.scope,
            "prop_type": series.prop_type,
            "weeks": [int(w) for w in series.weeks],
            "dates": [week_start(int(w)).isoformat() for w in series.weeks],
            "grid_log_price": grid.tolist(),
            "pdf": [m.pdf(grid).tolist() for m in series.mixtures],
        })
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True)
