"""Validation protocol: projection errors, rank tests, calibration,
cdf persistence, sparsity ablation and likelihood generalization.

Everything here evaluates index and density quality against held-out
sales, so the routines take fitted models (or ground truth objects that
expose the same density lookup) rather than fitting anything of their
own, except for the k-fold driver which refits all index kinds on each
fold's complement.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import chi2, rankdata
from sklearn.base import clone

from .benchmarks import HedonicIndexModel, RepeatSalesIndexModel
from .data import (
    FeatureKey,
    PopulationWeights,
    RegionRegistry,
    SalesDataset,
    compute_population_weights,
    filter_outliers,
    fold_assignments,
    pair_repeat_sales,
)
from .errors import DataError
from .indices import (
    DensitySeries,
    IndexSeries,
    density_series,
    index_from_density,
    pooled_density_series,
)
from .mdn import MixtureDensityEnsemble
from .mixture import GaussianMixture

logger = logging.getLogger(__name__)

PROJECTION_KINDS = ("hedonic", "repeat_sales", "d_gmean", "d_subregion")

# Two-tailed Nemenyi critical values at alpha = 0.05 (studentized range
# quantile over sqrt(2)), indexed by the number of compared methods.
NEMENYI_Q_05 = {
    2: 1.959964, 3: 2.343701, 4: 2.569032, 5: 2.727774, 6: 2.849705,
    7: 2.948320, 8: 3.030878, 9: 3.101730, 10: 3.163684,
}

__all__ = [
    "PROJECTION_KINDS",
    "NEMENYI_Q_05",
    "project_price",
    "ProjectionReport",
    "kfold_projection_errors",
    "RankTestReport",
    "friedman_nemenyi",
    "CalibrationCurve",
    "quantile_calibration",
    "MedianCalibration",
    "median_calibration",
    "median_calibration_by_region",
    "PersistenceRow",
    "cdf_persistence",
    "SparsityReport",
    "sparsity_experiment",
    "nll_generalization",
    "write_projection_csv",
    "write_nemenyi_csv",
    "write_calibration_curve_csv",
    "write_median_calibration_csv",
    "write_persistence_csv",
]


def project_price(series: IndexSeries, price1: float, t1: int, t2: int,
                  max_gap: int = 3) -> float:
    """Carry a sale price from t1 to t2 along an index curve."""
    return price1 * series.value_at(t2, max_gap) / series.value_at(t1, max_gap)


# -- k-fold projection errors --------------------------------------------------------


@dataclass
class ProjectionReport:
    """Aligned APE matrix plus per-scope summaries.

    ``ape`` holds one row per retained pair and one column per kind in
    ``kinds``; every kind was able to bridge both sale weeks for every
    retained pair, so rank tests on the matrix compare like with like.
    """

    kinds: list
    ape: np.ndarray
    pair_scope: list          # "metro/prop" label per ape row
    pair_region: list         # region of the pair, for subregion summaries
    n_dropped: int
    summary: list = field(default_factory=list)

    def build_summary(self) -> None:
        rows = []
        scopes = sorted(set(self.pair_scope))
        labels = np.asarray(self.pair_scope, dtype=object)
        for scope in ((["all"] + scopes) if len(scopes) > 1 else scopes):
            mask = np.ones(len(labels), dtype=bool) if scope == "all" else labels == scope
            if not mask.any():
                continue
            for j, kind in enumerate(self.kinds):
                col = self.ape[mask, j]
                rows.append({
                    "scope": scope, "kind": kind, "n_pairs": int(mask.sum()),
                    "mdape": float(np.median(col)), "mape": float(col.mean()),
                })
        self.summary = rows

    def mdape(self, kind: str, scope: str | None = None) -> float:
        j = self.kinds.index(kind)
        if scope is None:
            return float(np.median(self.ape[:, j]))
        mask = np.asarray(self.pair_scope, dtype=object) == scope
        if not mask.any():
            raise DataError(f"no pairs in scope {scope!r}")
        return float(np.median(self.ape[mask, j]))

    def to_dict(self) -> dict:
        return {
            "kinds": list(self.kinds),
            "n_pairs": int(self.ape.shape[0]),
            "n_dropped": self.n_dropped,
            "summary": self.summary,
        }


def kfold_projection_errors(dataset: SalesDataset, registry: RegionRegistry, *,
                            ensemble_template: MixtureDensityEnsemble,
                            n_folds: int = 20, seed: int = 0,
                            hedonic_template: HedonicIndexModel | None = None,
                            repeat_template: RepeatSalesIndexModel | None = None,
                            weights_period: tuple | None = None,
                            min_gap_weeks: int = 1, max_gap: int = 3,
                            window: tuple | None = None,
                            outlier_filter: bool = True) -> ProjectionReport:
    """Out-of-fold projection errors for every index kind.

    Dwellings are hashed into ``n_folds`` folds; for each fold all models
    are refit on the complement and each held-out repeat pair's first
    price is projected to its second sale week with every index kind.
    Errors are absolute percentage errors in price space. Pairs that any
    kind cannot bridge are dropped from all kinds.
    """
    hedonic_template = hedonic_template or HedonicIndexModel()
    repeat_template = repeat_template or RepeatSalesIndexModel()
    pairs = pair_repeat_sales(dataset, min_gap_weeks)
    if window is not None:
        lo, hi = int(window[0]), int(window[1])
        pairs = [p for p in pairs if lo <= p.t1 and p.t2 <= hi]
    if len(pairs) < n_folds:
        raise DataError(f"only {len(pairs)} repeat pairs for {n_folds} folds")

    record_folds = fold_assignments(dataset.dwelling_id, n_folds)
    fold_of = {}
    for dwelling, f in zip(dataset.dwelling_id, record_folds):
        fold_of[str(dwelling)] = int(f)
    week_lo, week_hi = dataset.week_range()
    weeks_all = np.arange(week_lo, week_hi + 1)
    groups = sorted({(registry.metro_of(p.region), p.prop_type) for p in pairs})

    ape_rows, scopes, regions_of_rows = [], [], []
    n_dropped = 0
    for f in range(n_folds):
        test_pairs = sorted((p for p in pairs if fold_of[p.dwelling_id] == f),
                            key=lambda p: (p.dwelling_id, p.t1, p.t2))
        if not test_pairs:
            continue
        train = dataset.subset(record_folds != f)
        if len(train) == 0:
            raise DataError(f"fold {f} leaves no training data")
        ensemble = clone(ensemble_template)
        ensemble.set_params(seed=int(ensemble_template.seed) + 100003 * (f + 1) + seed)
        ensemble.fit(train, registry)
        weights = compute_population_weights(train, weights_period)

        curves = {}
        for metro, prop in groups:
            metro_regions = set(registry.regions_in_metro(metro))
            mask = np.asarray([
                (r in metro_regions) and (p == prop)
                for r, p in zip(train.region, train.prop_type)], dtype=bool)
            if not mask.any():
                raise DataError(f"fold {f} has no training data for {metro}/{prop}")
            train_mp = train.subset(mask)
            scope = f"{metro}/{prop}"
            hed_data = filter_outliers(train_mp) if outlier_filter else train_mp
            hed = clone(hedonic_template).fit(hed_data, scope=scope)
            rs = clone(repeat_template).fit(train_mp, scope=scope)
            keys = [k for k in weights.weights
                    if k.region in metro_regions and k.prop_type == prop]
            pooled = pooled_density_series(
                ensemble, weights.restricted(keys), weeks_all, scope, prop_type=prop)
            curves[(metro, prop)] = {
                "hedonic": hed.index_series("monthly", max_gap),
                "repeat_sales": rs.index_series("monthly", max_gap),
                "d_gmean": index_from_density(pooled, "gmean"),
            }
            for key in keys:
                curves[(metro, prop)][("d_subregion", key.region)] = index_from_density(
                    density_series(ensemble, key, weeks_all), "gmean", kind="d_subregion")

        for p in test_pairs:
            metro = registry.metro_of(p.region)
            kit = curves[(metro, p.prop_type)]
            sub = kit.get(("d_subregion", p.region))
            chosen = [kit["hedonic"], kit["repeat_sales"], kit["d_gmean"], sub]
            if sub is None or not all(
                    c.covers(p.t1, max_gap) and c.covers(p.t2, max_gap) for c in chosen):
                n_dropped += 1
                continue
            price1, price2 = math.exp(p.y1), math.exp(p.y2)
            row = [abs(project_price(c, price1, p.t1, p.t2, max_gap) - price2)
                   / price2 * 100.0 for c in chosen]
            ape_rows.append(row)
            scopes.append(f"{metro}/{p.prop_type}")
            regions_of_rows.append(p.region)
        logger.info("fold %d/%d: %d test pairs projected", f + 1, n_folds, len(test_pairs))

    if not ape_rows:
        raise DataError("no pair survived projection in any fold")
    report = ProjectionReport(list(PROJECTION_KINDS), np.asarray(ape_rows),
                              scopes, regions_of_rows, n_dropped)
    report.build_summary()
    return report


# -- Friedman / Nemenyi ----------------------------------------------------------------


@dataclass
class RankTestReport:
    methods: list
    mean_ranks: np.ndarray
    statistic: float
    dof: int
    p_value: float
    alpha: float
    critical_difference: float
    n_blocks: int
    best: str
    indistinguishable_from_best: list

    def bands(self) -> list:
        half = 0.5 * self.critical_difference
        return [(float(r - half), float(r + half)) for r in self.mean_ranks]

    def rejects(self) -> bool:
        return self.p_value < self.alpha

    def to_dict(self) -> dict:
        return {
            "methods": list(self.methods),
            "mean_ranks": [float(r) for r in self.mean_ranks],
            "statistic": self.statistic,
            "dof": self.dof,
            "p_value": self.p_value,
            "alpha": self.alpha,
            "critical_difference": self.critical_difference,
            "n_blocks": self.n_blocks,
            "best": self.best,
            "indistinguishable_from_best": list(self.indistinguishable_from_best),
            "bands": self.bands(),
        }


def friedman_nemenyi(errors: np.ndarray, methods, alpha: float = 0.05) -> RankTestReport:
    """Friedman test over blocks (rows) with a Nemenyi follow-up.

    Ranks are tie-averaged within each block, smaller error better. The
    critical difference uses the alpha = 0.05 studentized-range constant;
    two methods whose mean ranks differ by less than it are statistically
    indistinguishable, and the multiple-comparison bands are mean rank
    plus or minus half the critical difference.
    """
    errors = np.asarray(errors, dtype=float)
    methods = list(methods)
    if errors.ndim != 2 or errors.shape[1] != len(methods):
        raise DataError("errors must be blocks x methods with one name per column")
    n, k = errors.shape
    if k < 2 or n < 2:
        raise DataError("rank test needs at least two methods and two blocks")
    if alpha != 0.05:
        raise DataError("only the alpha = 0.05 critical-value table is available")
    if k not in NEMENYI_Q_05:
        raise DataError(f"no critical value for {k} methods")
    ranks = rankdata(errors, axis=1, method="average")
    mean_ranks = ranks.mean(axis=0)
    centred = mean_ranks - (k + 1) / 2.0
    statistic = 12.0 * n / (k * (k + 1)) * float((centred**2).sum())
    dof = k - 1
    p_value = float(chi2.sf(statistic, dof))
    cd = NEMENYI_Q_05[k] * math.sqrt(k * (k + 1) / (6.0 * n))
    best_idx = int(np.argmin(mean_ranks))
    indist = [methods[j] for j in range(k)
              if abs(mean_ranks[j] - mean_ranks[best_idx]) < cd]
    return RankTestReport(methods, mean_ranks, statistic, dof, p_value, alpha,
                          cd, n, methods[best_idx], indist)


# -- quantile calibration ---------------------------------------------------------------


@dataclass
class CalibrationCurve:
    """Observed coverage pi_hat of each nominal quantile level."""

    percentiles: np.ndarray
    pi_hat: np.ndarray
    n_sales: int

    def deviations(self) -> np.ndarray:
        return np.abs(self.pi_hat - self.percentiles)

    def to_dict(self) -> dict:
        return {
            "percentiles": self.percentiles.tolist(),
            "pi_hat": self.pi_hat.tolist(),
            "n_sales": self.n_sales,
        }


def quantile_calibration(series: DensitySeries, dataset: SalesDataset,
                         percentiles) -> CalibrationCurve:
    """Fraction of sales priced below each weekly quantile curve.

    Every sale week must be covered by the density series; the caller
    restricts the dataset to the series' scope.
    """
    ps = np.asarray(percentiles, dtype=float)
    if ps.ndim != 1 or ps.size == 0 or ((ps <= 0) | (ps >= 1)).any():
        raise DataError("percentiles must lie strictly inside (0, 1)")
    if len(dataset) == 0:
        raise DataError("no sales to calibrate against")
    week_pos = {int(w): i for i, w in enumerate(series.weeks)}
    curves = np.stack([np.asarray(m.quantile(ps)) for m in series.mixtures])
    missing = sorted({int(w) for w in dataset.week} - set(week_pos))
    if missing:
        raise DataError(f"density series lacks weeks {missing[:5]} present in the sales data")
    rows = np.asarray([week_pos[int(w)] for w in dataset.week])
    below = dataset.log_price[:, None] < curves[rows, :]
    return CalibrationCurve(ps, below.mean(axis=0), len(dataset))


@dataclass
class MedianCalibration:
    """Share of sales below one price-level index curve."""

    kind: str
    scope: str
    pi_hat: float
    delta_median: float       # |pi_hat - 0.5| in percentage points
    n_used: int
    n_skipped: int

    def to_dict(self) -> dict:
        return {"kind": self.kind, "scope": self.scope, "pi_hat": self.pi_hat,
                "delta_median": self.delta_median, "n_used": self.n_used,
                "n_skipped": self.n_skipped}


def median_calibration(series: IndexSeries, dataset: SalesDataset,
                       max_gap: int = 3) -> MedianCalibration:
    """How close an index curve runs to the median of observed prices.

    Sales whose week cannot be bridged onto the curve are skipped and
    counted; an index calibrated as a median should leave half the sales
    below it, so the reported delta is the drift from 50 percent.
    """
    if len(dataset) == 0:
        raise DataError("no sales to calibrate against")
    below = []
    skipped = 0
    price = np.exp(dataset.log_price)
    for i in range(len(dataset)):
        w = int(dataset.week[i])
        if not series.covers(w, max_gap):
            skipped += 1
            continue
        below.append(price[i] < series.value_at(w, max_gap))
    if not below:
        raise DataError("no sale week could be bridged onto the index curve")
    pi_hat = float(np.mean(below))
    return MedianCalibration(series.kind, series.scope, pi_hat,
                             abs(pi_hat - 0.5) * 100.0, len(below), skipped)


def median_calibration_by_region(series_by_region: dict, dataset: SalesDataset,
                                 max_gap: int = 3):
    """Per-region median calibration, summarised by the median deviation."""
    if not series_by_region:
        raise DataError("no per-region series supplied")
    results = {}
    for region in sorted(series_by_region):
        sub = dataset.subset(dataset.region == region)
        if len(sub) == 0:
            continue
        results[region] = median_calibration(series_by_region[region], sub, max_gap)
    if not results:
        raise DataError("no region had both a series and sales")
    agg = float(np.median([r.delta_median for r in results.values()]))
    return agg, results


# -- cdf persistence ---------------------------------------------------------------------


@dataclass
class PersistenceRow:
    metro: str
    prop_type: str
    n_pairs: int
    corr_metro: float
    corr_subregion: float

    def to_dict(self) -> dict:
        return {"metro": self.metro, "prop_type": self.prop_type, "n_pairs": self.n_pairs,
                "corr_metro": self.corr_metro, "corr_subregion": self.corr_subregion}


def _mixtures_for_cells(source, cells: list) -> dict:
    """Evaluate a density source on unique (key, week) cells."""
    if hasattr(source, "predict_mixtures"):
        mixes = source.predict_mixtures([c[0] for c in cells],
                                        np.asarray([c[1] for c in cells]))
    elif hasattr(source, "mixture_at"):
        mixes = [source.mixture_at(key, week) for key, week in cells]
    else:
        raise TypeError("density source must expose predict_mixtures or mixture_at")
    return dict(zip(cells, mixes))


def cdf_persistence(source, pairs, weights: PopulationWeights,
                    registry: RegionRegistry, min_pairs: int = 10) -> list:
    """Correlation of a dwelling's cdf position across its two sales.

    Computed per (metro, prop_type) at two scopes: within the dwelling's
    own subregion density and within the metro density (regional
    densities pooled with the fixed population weights). ``source`` is a
    fitted density model or a ground truth object.
    """
    if not pairs:
        raise DataError("no repeat pairs to evaluate")
    groups = {}
    for p in pairs:
        groups.setdefault((registry.metro_of(p.region), p.prop_type), []).append(p)
    rows = []
    for (metro, prop) in sorted(groups):
        members = groups[(metro, prop)]
        if len(members) < min_pairs:
            logger.info("skipping %s/%s: only %d pairs", metro, prop, len(members))
            continue
        metro_regions = set(registry.regions_in_metro(metro))
        keys = sorted(k for k in weights.weights
                      if k.region in metro_regions and k.prop_type == prop)
        if not keys:
            raise DataError(f"no weighted keys for {metro}/{prop}")
        w_restricted = weights.restricted(keys)
        sub_cells = sorted({(FeatureKey(p.region, prop), t)
                            for p in members for t in (p.t1, p.t2)})
        sub_mix = _mixtures_for_cells(source, sub_cells)
        weeks_needed = sorted({t for p in members for t in (p.t1, p.t2)})
        metro_cells = sorted({(k, t) for k in keys for t in weeks_needed})
        metro_mix_parts = _mixtures_for_cells(source, metro_cells)
        metro_mix = {
            t: GaussianMixture.pool([metro_mix_parts[(k, t)] for k in keys],
                                    [w_restricted[k] for k in keys])
            for t in weeks_needed
        }
        c_sub = np.asarray([
            [float(sub_mix[(FeatureKey(p.region, prop), p.t1)].cdf(p.y1)),
             float(sub_mix[(FeatureKey(p.region, prop), p.t2)].cdf(p.y2))]
            for p in members])
        c_met = np.asarray([
            [float(metro_mix[p.t1].cdf(p.y1)), float(metro_mix[p.t2].cdf(p.y2))]
            for p in members])
        corr_sub = float(np.corrcoef(c_sub[:, 0], c_sub[:, 1])[0, 1])
        corr_met = float(np.corrcoef(c_met[:, 0], c_met[:, 1])[0, 1])
        rows.append(PersistenceRow(metro, prop, len(members), corr_met, corr_sub))
    if not rows:
        raise DataError("no (metro, prop_type) group had enough repeat pairs")
    return rows


# -- sparsity ablation --------------------------------------------------------------------


@dataclass
class SparsityReport:
    region: str
    prop_type: str
    keep_fraction: float
    n_target_records: int
    n_kept_records: int
    weeks: np.ndarray
    control: np.ndarray
    with_adjacency: np.ndarray
    without_adjacency: np.ndarray

    def departure(self, values: np.ndarray) -> np.ndarray:
        return np.abs(values / self.control - 1.0)

    @property
    def max_departure_with(self) -> float:
        return float(self.departure(self.with_adjacency).max())

    @property
    def max_departure_without(self) -> float:
        return float(self.departure(self.without_adjacency).max())

    def to_dict(self) -> dict:
        return {
            "region": self.region, "prop_type": self.prop_type,
            "keep_fraction": self.keep_fraction,
            "n_target_records": self.n_target_records,
            "n_kept_records": self.n_kept_records,
            "weeks": self.weeks.tolist(),
            "control": self.control.tolist(),
            "with_adjacency": self.with_adjacency.tolist(),
            "without_adjacency": self.without_adjacency.tolist(),
            "max_departure_with": self.max_departure_with,
            "max_departure_without": self.max_departure_without,
        }


def sparsity_experiment(dataset: SalesDataset, registry: RegionRegistry, region: str, *,
                        ensemble_template: MixtureDensityEnsemble,
                        keep_fraction: float = 0.1, seed: int = 0,
                        prop_type: str | None = None,
                        statistic: str = "gmean") -> SparsityReport:
    """Data-sparsity ablation for one region.

    The target region's records are subsampled to ``keep_fraction`` and
    the region's density index is rebuilt twice on the thinned data, with
    the neighbourhood links of the target region intact and removed; both
    are compared to the full-data control curve. All three runs share the
    ensemble seed so the comparison isolates the data change.
    """
    if not 0 < keep_fraction <= 1:
        raise DataError("keep_fraction must lie in (0, 1]")
    if region not in registry:
        raise DataError(f"unknown region {region!r}")
    target = np.asarray([r == region for r in dataset.region], dtype=bool)
    n_target = int(target.sum())
    if n_target < 10:
        raise DataError(f"region {region!r} has too few records ({n_target}) to thin")
    if prop_type is None:
        props = [p for p, t in zip(dataset.prop_type, target) if t]
        prop_type = max(sorted(set(props)), key=props.count)

    rng = np.random.default_rng(seed)
    target_idx = np.flatnonzero(target)
    n_keep = max(int(round(keep_fraction * n_target)), 1)
    kept = rng.choice(target_idx, size=n_keep, replace=False)
    keep_mask = ~target
    keep_mask[kept] = True
    thinned = dataset.subset(keep_mask)

    week_lo, week_hi = dataset.week_range()
    weeks = np.arange(week_lo, week_hi + 1)
    key = FeatureKey(region, prop_type)

    def _curve(ds, reg):
        model = clone(ensemble_template)
        model.fit(ds, reg)
        series = index_from_density(density_series(model, key, weeks), statistic)
        return series.normalized().values

    control = _curve(dataset, registry)
    with_adj = _curve(thinned, registry)
    without_adj = _curve(thinned, registry.without_neighbors(region))
    return SparsityReport(region, prop_type, keep_fraction, n_target, n_keep,
                          weeks, control, with_adj, without_adj)


# -- likelihood generalisation ---------------------------------------------------------------


def nll_generalization(model, train: SalesDataset, holdout: SalesDataset) -> dict:
    """Mean NLL on training and held-out sales, and the holdout gap."""
    if len(train) == 0 or len(holdout) == 0:
        raise DataError("need non-empty train and holdout datasets")
    train_nll = float(model.dataset_nll(train))
    holdout_nll = float(model.dataset_nll(holdout))
    return {"train_nll": train_nll, "holdout_nll": holdout_nll,
            "gap": holdout_nll - train_nll}


# -- report writers ----------------------------------------------------------------------------


def write_projection_csv(path, report: ProjectionReport) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scope", "kind", "n_pairs", "mdape", "mape"])
        for row in report.summary:
            writer.writerow([row["scope"], row["kind"], row["n_pairs"],
                             repr(row["mdape"]), repr(row["mape"])])


def write_nemenyi_csv(path, report: RankTestReport) -> None:
    order = np.argsort(report.mean_ranks)
    bands = report.bands()
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "mean_rank", "band_low", "band_high"])
        for j in order:
            writer.writerow([report.methods[j], repr(float(report.mean_ranks[j])),
                             repr(bands[j][0]), repr(bands[j][1])])


def write_calibration_curve_csv(path, curve: CalibrationCurve, scope: str = "all") -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scope", "percentile", "pi_hat", "n_sales"])
        for p, pi in zip(curve.percentiles, curve.pi_hat):
            writer.writerow([scope, repr(float(p)), repr(float(pi)), curve.n_sales])


def write_median_calibration_csv(path, results: list) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["kind", "scope", "pi_hat", "delta_median", "n_used", "n_skipped"])
        for r in results:
            writer.writerow([r.kind, r.scope, repr(r.pi_hat), repr(r.delta_median),
                             r.n_used, r.n_skipped])


def write_persistence_csv(path, rows: list) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metro", "prop_type", "n_pairs", "corr_metro", "corr_subregion"])
        for r in rows:
            writer.writerow([r.metro, r.prop_type, r.n_pairs,
                             repr(r.corr_metro), repr(r.corr_subregion)])


def dump_json(path, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)
