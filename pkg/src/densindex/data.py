"""Sales data model: time discretisation, feature keys, datasets, weights.

Prices live on the natural-log scale from the moment they are parsed.
Calendar time is discretised into week indices counted from the Monday
epoch of 1990-01-01, so weekly positions are integers everywhere and the
cyclical week-of-year is simply ``week % 52``.
"""

from __future__ import annotations

import csv
import datetime
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

logger = logging.getLogger(__name__)

EPOCH = datetime.date(1990, 1, 1)
WEEKS_PER_YEAR = 52
PROPERTY_TYPES = ("house", "unit")
LAND_BAND_WIDTH = 0.5  # width of a land band in log(m^2)

SALES_CSV_COLUMNS = (
    "dwelling_id",
    "price",
    "date",
    "region",
    "prop_type",
    "bedrooms",
    "land_area",
    "bathrooms",
    "parking",
)

__all__ = [
    "EPOCH",
    "WEEKS_PER_YEAR",
    "PROPERTY_TYPES",
    "SALES_CSV_COLUMNS",
    "week_index",
    "week_start",
    "week_of_year",
    "land_band",
    "FeatureKey",
    "RegionRegistry",
    "SalesDataset",
    "ParseResult",
    "parse_sales_csv",
    "write_sales_csv",
    "PopulationWeights",
    "compute_population_weights",
    "RepeatSalePair",
    "pair_repeat_sales",
    "filter_outliers",
    "fold_assignments",
]


def week_index(d: datetime.date) -> int:
    """Whole weeks elapsed since 1990-01-01 (floor for earlier dates)."""
    return (d - EPOCH).days // 7


def week_start(week: int) -> datetime.date:
    """First day (Monday) of the given week index."""
    return EPOCH + datetime.timedelta(weeks=int(week))


def week_of_year(week: int):
    """Cyclical position of a week inside the 52-week year."""
    return week % WEEKS_PER_YEAR


def land_band(log_land_area: float) -> int:
    """Discretise log land area into half-log-unit bands."""
    return int(math.floor(log_land_area / LAND_BAND_WIDTH))


@dataclass(frozen=True, order=True)
class FeatureKey:
    """Identity of one granular density cell.

    ``bedrooms`` and ``land_band`` stay ``None`` unless the model is
    configured to resolve them, in which case they are part of the key.
    """

    region: str
    prop_type: str
    bedrooms: int | None = None
    land_band: int | None = None

    def __post_init__(self):
        if self.prop_type not in PROPERTY_TYPES:
            raise ValueError(f"unknown prop_type {self.prop_type!r}")

    def label(self) -> str:
        parts = [self.region, self.prop_type]
        if self.bedrooms is not None:
            parts.append(f"bed{self.bedrooms}")
        if self.land_band is not None:
            parts.append(f"land{self.land_band}")
        return "/".join(parts)


class RegionRegistry:
    """Region universe: metro membership and the neighbourhood graph.

    Parameters
    ----------
    regions : iterable of (region_id, metro_id)
    adjacency : dict region -> iterable of neighbouring regions
        Must be symmetric and free of self-loops; all endpoints known.
    """

    def __init__(self, regions, adjacency):
        pairs = list(regions)
        self._regions = [r for r, _ in pairs]
        if len(set(self._regions)) != len(self._regions):
            raise DataError("duplicate region ids in registry")
        self._metro = dict(pairs)
        adj = {r: sorted(set(adjacency.get(r, ()))) for r in self._regions}
        for r, neigh in adjacency.items():
            if r not in self._metro:
                raise DataError(f"adjacency lists unknown region {r!r}")
        for r, neigh in adj.items():
            for s in neigh:
                if s == r:
                    raise DataError(f"region {r!r} is adjacent to itself")
                if s not in self._metro:
                    raise DataError(f"region {r!r} has unknown neighbour {s!r}")
                if r not in adj[s]:
                    raise DataError(f"adjacency is not symmetric between {r!r} and {s!r}")
        self._adjacency = adj

    @property
    def regions(self) -> list:
        return list(self._regions)

    @property
    def metros(self) -> list:
        return sorted(set(self._metro.values()))

    def metro_of(self, region: str) -> str:
        try:
            return self._metro[region]
        except KeyError:
            raise DataError(f"unknown region {region!r}") from None

    def neighbors(self, region: str) -> list:
        if region not in self._adjacency:
            raise DataError(f"unknown region {region!r}")
        return list(self._adjacency[region])

    def regions_in_metro(self, metro: str) -> list:
        out = [r for r in self._regions if self._metro[r] == metro]
        if not out:
            raise DataError(f"unknown metro {metro!r}")
        return out

    def __contains__(self, region) -> bool:
        return region in self._metro

    def __len__(self) -> int:
        return len(self._regions)

    def without_neighbors(self, region: str) -> "RegionRegistry":
        """Copy of the registry with every link touching ``region`` removed."""
        if region not in self._metro:
            raise DataError(f"unknown region {region!r}")
        adjacency = {
            r: [s for s in neigh if region not in (r, s)]
            for r, neigh in self._adjacency.items()
        }
        return RegionRegistry([(r, self._metro[r]) for r in self._regions], adjacency)

    def neighbor_matrix(self, region_order) -> np.ndarray:
        """Row-normalised adjacency over ``region_order``.

        Row i averages the regions adjacent to region i; rows of isolated
        regions stay zero so their neighbourhood signal is a zero vector.
        """
        index = {r: i for i, r in enumerate(region_order)}
        mat = np.zeros((len(region_order), len(region_order)))
        for r in region_order:
            neigh = [s for s in self._adjacency[r] if s in index]
            for s in neigh:
                mat[index[r], index[s]] = 1.0 / len(neigh)
        return mat

    def to_dict(self) -> dict:
        return {
            "regions": [
                {"id": r, "metro": self._metro[r], "neighbors": self._adjacency[r]}
                for r in self._regions
            ]
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "RegionRegistry":
        try:
            rows = payload["regions"]
            regions = [(row["id"], row["metro"]) for row in rows]
            adjacency = {row["id"]: row.get("neighbors", []) for row in rows}
        except (KeyError, TypeError) as exc:
            raise DataError(f"malformed region registry: {exc}") from exc
        return cls(regions, adjacency)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True, indent=1)

    @classmethod
    def load(cls, path) -> "RegionRegistry":
        try:
            with open(path) as fh:
                payload = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read region registry {path}: {exc}") from exc
        return cls.from_dict(payload)


class SalesDataset:
    """Columnar store of sale records.

    Columns are parallel numpy arrays; ``bedrooms``, ``bathrooms``,
    ``parking`` and ``log_land_area`` use NaN for missing values.
    """

    _FIELDS = (
        "dwelling_id",
        "log_price",
        "week",
        "region",
        "prop_type",
        "bedrooms",
        "log_land_area",
        "bathrooms",
        "parking",
    )

    def __init__(self, dwelling_id, log_price, week, region, prop_type,
                 bedrooms=None, log_land_area=None, bathrooms=None, parking=None):
        n = len(dwelling_id)
        self.dwelling_id = np.asarray(dwelling_id, dtype=object)
        self.log_price = np.asarray(log_price, dtype=float)
        self.week = np.asarray(week, dtype=np.int64)
        self.region = np.asarray(region, dtype=object)
        self.prop_type = np.asarray(prop_type, dtype=object)

        def _optional(col):
            if col is None:
                return np.full(n, np.nan)
            return np.asarray(col, dtype=float)

        self.bedrooms = _optional(bedrooms)
        self.log_land_area = _optional(log_land_area)
        self.bathrooms = _optional(bathrooms)
        self.parking = _optional(parking)
        for name in self._FIELDS:
            if len(getattr(self, name)) != n:
                raise DataError(f"column {name} has mismatched length")
        if n and not np.isfinite(self.log_price).all():
            raise DataError("log prices must be finite")

    def __len__(self) -> int:
        return len(self.log_price)

    @property
    def week_of_year(self) -> np.ndarray:
        return self.week % WEEKS_PER_YEAR

    @property
    def land_band(self) -> np.ndarray:
        """Half-log-unit land bands; NaN land areas map to NaN."""
        with np.errstate(invalid="ignore"):
            return np.floor(self.log_land_area / LAND_BAND_WIDTH)

    def week_range(self) -> tuple:
        if len(self) == 0:
            raise DataError("empty dataset has no week range")
        return int(self.week.min()), int(self.week.max())

    def subset(self, mask) -> "SalesDataset":
        return SalesDataset(**{name: getattr(self, name)[mask] for name in self._FIELDS})

    def key_of(self, i: int, resolve_bedrooms: bool = False,
               resolve_land_band: bool = False) -> FeatureKey:
        bed = None
        band = None
        if resolve_bedrooms:
            b = self.bedrooms[i]
            bed = None if np.isnan(b) else int(b)
        if resolve_land_band:
            lb = self.land_band[i]
            band = None if np.isnan(lb) else int(lb)
        return FeatureKey(str(self.region[i]), str(self.prop_type[i]), bed, band)

    def keys(self, resolve_bedrooms: bool = False, resolve_land_band: bool = False) -> list:
        """Distinct feature keys present, sorted."""
        return sorted({
            self.key_of(i, resolve_bedrooms, resolve_land_band) for i in range(len(self))
        })

    def concat(self, other: "SalesDataset") -> "SalesDataset":
        return SalesDataset(**{
            name: np.concatenate([getattr(self, name), getattr(other, name)])
            for name in self._FIELDS
        })


@dataclass
class ParseResult:
    dataset: SalesDataset
    n_rows: int
    rejects: list = field(default_factory=list)  # (1-based data row, reason)


def _parse_row(row: dict, registry: RegionRegistry | None):
    try:
        price = float(row["price"])
    except ValueError:
        raise ValueError(f"price {row['price']!r} is not a number")
    if not math.isfinite(price) or price <= 0:
        raise ValueError(f"price must be positive, got {row['price']!r}")
    try:
        d = datetime.date.fromisoformat(row["date"])
    except ValueError:
        raise ValueError(f"date {row['date']!r} is not ISO formatted")
    if d < EPOCH:
        raise ValueError(f"date {row['date']!r} precedes the 1990-01-01 epoch")
    region = row["region"].strip()
    if not region:
        raise ValueError("region is empty")
    if registry is not None and region not in registry:
        raise ValueError(f"region {region!r} not in registry")
    prop_type = row["prop_type"].strip()
    if prop_type not in PROPERTY_TYPES:
        raise ValueError(f"prop_type must be one of {PROPERTY_TYPES}, got {row['prop_type']!r}")
    dwelling = row["dwelling_id"].strip()
    if not dwelling:
        raise ValueError("dwelling_id is empty")

    def _opt_float(name, positive=False):
        raw = row.get(name, "").strip()
        if raw == "":
            return math.nan
        val = float(raw)  # ValueError propagates with the row
        if not math.isfinite(val) or (positive and val <= 0) or (not positive and val < 0):
            raise ValueError(f"{name} out of range: {raw!r}")
        return val

    land = _opt_float("land_area", positive=True)
    return {
        "dwelling_id": dwelling,
        "log_price": math.log(price),
        "week": week_index(d),
        "region": region,
        "prop_type": prop_type,
        "bedrooms": _opt_float("bedrooms"),
        "log_land_area": math.log(land) if not math.isnan(land) else math.nan,
        "bathrooms": _opt_float("bathrooms"),
        "parking": _opt_float("parking"),
    }


def parse_sales_csv(path, registry: RegionRegistry | None = None,
                    max_reject_fraction: float = 0.5) -> ParseResult:
    """Read a sales CSV into a dataset, collecting per-row rejects.

    Rows that fail validation are skipped and reported with their 1-based
    data row number. More than ``max_reject_fraction`` rejected rows, or a
    wrong header, is treated as a malformed file.
    """
    columns = {name: [] for name in (
        "dwelling_id", "log_price", "week", "region", "prop_type",
        "bedrooms", "log_land_area", "bathrooms", "parking")}
    rejects = []
    n_rows = 0
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise DataError(f"cannot read sales file {path}: {exc}") from exc
    with fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DataError(f"sales file {path} is empty")
        if tuple(reader.fieldnames) != SALES_CSV_COLUMNS:
            raise DataError(
                f"sales file {path} has header {reader.fieldnames}, "
                f"expected {list(SALES_CSV_COLUMNS)}")
        for n_rows, row in enumerate(reader, start=1):
            try:
                if None in row or any(v is None for v in row.values()):
                    raise ValueError("wrong number of fields")
                parsed = _parse_row(row, registry)
            except ValueError as exc:
                rejects.append((n_rows, str(exc)))
                continue
            for name, value in parsed.items():
                columns[name].append(value)
    if n_rows == 0:
        raise DataError(f"sales file {path} contains no data rows")
    if len(rejects) > max_reject_fraction * n_rows:
        raise DataError(
            f"sales file {path}: {len(rejects)} of {n_rows} rows rejected; "
            f"first: row {rejects[0][0]}: {rejects[0][1]}")
    if rejects:
        logger.warning("%s: rejected %d of %d rows", path, len(rejects), n_rows)
    return ParseResult(SalesDataset(**columns), n_rows, rejects)


def write_sales_csv(path, dataset: SalesDataset) -> None:
    """Inverse of :func:`parse_sales_csv` for synthetic data round trips."""

    def _fmt(x, as_int=False):
        if np.isnan(x):
            return ""
        return str(int(x)) if as_int else repr(float(x))

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SALES_CSV_COLUMNS)
        land = np.exp(dataset.log_land_area)
        price = np.exp(dataset.log_price)
        for i in range(len(dataset)):
            writer.writerow([
                dataset.dwelling_id[i],
                repr(float(price[i])),
                week_start(dataset.week[i]).isoformat(),
                dataset.region[i],
                dataset.prop_type[i],
                _fmt(dataset.bedrooms[i], as_int=True),
                _fmt(land[i]),
                _fmt(dataset.bathrooms[i], as_int=True),
                _fmt(dataset.parking[i], as_int=True),
            ])


@dataclass(frozen=True)
class PopulationWeights:
    """Fixed aggregation weights h(key) = n_key / sum n over a base period."""

    weights: dict
    period: tuple  # (first week, last week) inclusive

    def weight(self, key: FeatureKey) -> float:
        return self.weights.get(key, 0.0)

    def restricted(self, keys) -> dict:
        """Weights renormalised over ``keys``; error if all are zero."""
        sub = {k: self.weights.get(k, 0.0) for k in keys}
        total = sum(sub.values())
        if total <= 0:
            raise DataError("no population weight in the requested scope")
        return {k: v / total for k, v in sub.items()}


def compute_population_weights(dataset: SalesDataset, period: tuple | None = None,
                               resolve_bedrooms: bool = False,
                               resolve_land_band: bool = False) -> PopulationWeights:
    """Sale-count shares per feature key over ``period`` (default full span)."""
    if len(dataset) == 0:
        raise DataError("cannot compute weights from an empty dataset")
    if period is None:
        period = dataset.week_range()
    first, last = int(period[0]), int(period[1])
    if last < first:
        raise DataError(f"weight period {period} is reversed")
    mask = (dataset.week >= first) & (dataset.week <= last)
    if not mask.any():
        raise DataError(f"no sales inside weight period {period}")
    sub = dataset.subset(mask)
    counts = {}
    for i in range(len(sub)):
        key = sub.key_of(i, resolve_bedrooms, resolve_land_band)
        counts[key] = counts.get(key, 0) + 1
    total = float(len(sub))
    return PopulationWeights({k: c / total for k, c in counts.items()}, (first, last))


@dataclass(frozen=True)
class RepeatSalePair:
    """Consecutive sales of one dwelling (weeks t1 < t2, log prices y1, y2)."""

    dwelling_id: str
    t1: int
    t2: int
    y1: float
    y2: float
    region: str
    prop_type: str


def pair_repeat_sales(dataset: SalesDataset, min_gap_weeks: int = 1) -> list:
    """Consecutive same-dwelling sale pairs, ordered by (dwelling, t1).

    Multiple sales of a dwelling inside one week collapse to the last
    record in file order. Pairs closer than ``min_gap_weeks`` are skipped.
    """
    order = {}
    for i in range(len(dataset)):
        order.setdefault(str(dataset.dwelling_id[i]), {})[int(dataset.week[i])] = i
    pairs = []
    for dwelling in sorted(order):
        by_week = order[dwelling]
        idx = [by_week[w] for w in sorted(by_week)]
        for a, b in zip(idx, idx[1:]):
            if dataset.week[b] - dataset.week[a] < min_gap_weeks:
                continue
            if dataset.region[a] != dataset.region[b] or dataset.prop_type[a] != dataset.prop_type[b]:
                logger.warning("dwelling %s changes region or type between sales; pair skipped",
                               dwelling)
                continue
            pairs.append(RepeatSalePair(
                dwelling_id=dwelling,
                t1=int(dataset.week[a]), t2=int(dataset.week[b]),
                y1=float(dataset.log_price[a]), y2=float(dataset.log_price[b]),
                region=str(dataset.region[a]), prop_type=str(dataset.prop_type[a]),
            ))
    return pairs


def filter_outliers(dataset: SalesDataset, k: float = 3.0, min_cell: int = 20) -> SalesDataset:
    """Trim log prices outside median +- k IQR of their comparison cell.

    Cells are (region, prop_type, calendar year); cells with fewer than
    ``min_cell`` records fall back to the (prop_type, year) pool. A zero
    IQR keeps the whole cell. Intended for the linear benchmark models;
    the density models train on unfiltered data.
    """
    if len(dataset) == 0:
        return dataset
    year = np.array([week_start(w).year for w in dataset.week])
    fine_cells = {}
    pool_cells = {}
    for i in range(len(dataset)):
        fine_cells.setdefault((dataset.region[i], dataset.prop_type[i], year[i]), []).append(i)
        pool_cells.setdefault((dataset.prop_type[i], year[i]), []).append(i)
    keep = np.ones(len(dataset), dtype=bool)
    for cell, members in fine_cells.items():
        idx = members if len(members) >= min_cell else pool_cells[(cell[1], cell[2])]
        ref = dataset.log_price[idx]
        med = np.median(ref)
        q1, q3 = np.percentile(ref, [25.0, 75.0])
        iqr = q3 - q1
        if iqr <= 0:
            continue
        lo, hi = med - k * iqr, med + k * iqr
        for i in members:
            y = dataset.log_price[i]
            if y < lo or y > hi:
                keep[i] = False
    dropped = int((~keep).sum())
    if dropped:
        logger.info("outlier filter removed %d of %d records", dropped, len(dataset))
    return dataset.subset(keep)


def fold_assignments(dwelling_ids, n_folds: int) -> np.ndarray:
    """Stable dwelling-level fold ids from the md5 of the dwelling id.

    Hash based so a dwelling's every sale (and both legs of a repeat pair)
    lands in the same fold regardless of dataset order or subsetting.
    """
    if n_folds < 2:
        raise ValueError("need at least two folds")
    out = np.empty(len(dwelling_ids), dtype=np.int64)
    for i, dwelling in enumerate(dwelling_ids):
        digest = hashlib.md5(str(dwelling).encode("utf-8")).hexdigest()
        out[i] = int(digest[:12], 16) % n_folds
    return out
