"""Linear benchmark indices: hedonic ridge and repeat-sales ridge.

Both models reduce to a ridge least-squares problem on a sparse design,
solved matrix-free with conjugate gradients. The intercept column of the
hedonic design is left out of the penalty: that keeps the fitted time
path exactly equivariant under a constant shift of all log prices, while
the penalty on the dummy blocks pins down their additive ambiguity.
"""

from __future__ import annotations

import logging

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import LinearOperator, cg
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .data import SalesDataset, pair_repeat_sales
from .errors import DataError, NumericalError
from .indices import IndexSeries, monthly_weeks

logger = logging.getLogger(__name__)

HEDONIC_COVARIATES = ("bedrooms", "bathrooms", "parking", "log_land_area")

__all__ = ["HedonicIndexModel", "RepeatSalesIndexModel", "solve_ridge", "HEDONIC_COVARIATES"]


def solve_ridge(X: sparse.csr_matrix, y: np.ndarray, lam: float,
                penalized: np.ndarray, rtol: float = 1e-10) -> np.ndarray:
    """Solve (X'X + lam * diag(penalized)) beta = X'y without forming X'X.

    Jacobi preconditioned conjugate gradients; the operator applies
    X'(Xv) so memory stays linear in nnz(X).
    """
    n_feat = X.shape[1]
    pen = penalized.astype(float) * lam

    def matvec(v):
        return X.T @ (X @ v) + pen * v

    diag = np.asarray(X.power(2).sum(axis=0)).ravel() + pen
    diag[diag <= 0] = 1.0
    op = LinearOperator((n_feat, n_feat), matvec=matvec, dtype=float)
    precond = LinearOperator((n_feat, n_feat), matvec=lambda v: v / diag, dtype=float)
    b = X.T @ y
    beta, info = cg(op, b, rtol=rtol, atol=0.0, maxiter=max(10 * n_feat, 1000), M=precond)
    if info != 0:
        raise NumericalError(f"ridge CG failed to converge (info={info})")
    if not np.isfinite(beta).all():
        raise NumericalError("ridge solution is not finite")
    return beta


def _series_from_deltas(deltas: dict, level: float, kind: str, scope: str,
                        sampling: str, max_gap: int = 3) -> IndexSeries:
    weeks = np.asarray(sorted(deltas), dtype=np.int64)
    values = np.exp(np.asarray([deltas[w] for w in weeks]) + level)
    weekly = IndexSeries(kind, scope, weeks, values)
    if sampling == "weekly":
        return weekly
    if sampling != "monthly":
        raise DataError(f"unknown sampling {sampling!r}; use 'weekly' or 'monthly'")
    months = [w for w in monthly_weeks(int(weeks[0]), int(weeks[-1]))
              if weekly.covers(w, max_gap)]
    if not months:
        raise DataError("no monthly sample points can be bridged to fitted weeks")
    sampled = [weekly.value_at(w, max_gap) for w in months]
    return IndexSeries(kind, scope, np.asarray(months, dtype=np.int64), np.asarray(sampled))


class HedonicIndexModel(BaseEstimator):
    """Ridge hedonic model: log price ~ covariates + region + week dummies.

    The index is H(t) = exp(delta_t + C) with C the mean fitted
    non-temporal part over the training records, which converts the
    dummy path into a representative price level.

    Parameters
    ----------
    ridge_scale : float
        Penalty lambda = ridge_scale * n_records.
    covariates : tuple of str
        Dataset columns used as continuous regressors. Records missing
        any of them are dropped at fit time.
    cg_rtol : float
        Relative residual tolerance of the conjugate gradient solve.
    """

    def __init__(self, ridge_scale: float = 1e-4,
                 covariates: tuple = HEDONIC_COVARIATES, cg_rtol: float = 1e-10):
        self.ridge_scale = ridge_scale
        self.covariates = covariates
        self.cg_rtol = cg_rtol

    def fit(self, dataset: SalesDataset, scope: str = "all") -> "HedonicIndexModel":
        if self.ridge_scale <= 0:
            raise ValueError("ridge_scale must be positive")
        bad = [c for c in self.covariates if c not in ("bedrooms", "bathrooms",
                                                       "parking", "log_land_area")]
        if bad:
            raise ValueError(f"unknown covariates {bad}")
        if len(dataset) == 0:
            raise DataError("cannot fit a hedonic model on an empty dataset")
        cov_cols = [getattr(dataset, c) for c in self.covariates]
        complete = np.ones(len(dataset), dtype=bool)
        for col in cov_cols:
            complete &= ~np.isnan(col)
        if not complete.any():
            raise DataError("no record carries all hedonic covariates")
        dropped = int((~complete).sum())
        if dropped:
            logger.info("hedonic fit drops %d records with missing covariates", dropped)
        ds = dataset.subset(complete)

        n = len(ds)
        regions = sorted(set(ds.region))
        weeks = sorted({int(w) for w in ds.week})
        region_pos = {r: i for i, r in enumerate(regions)}
        week_pos = {w: i for i, w in enumerate(weeks)}
        n_cov = len(self.covariates)
        col_region0 = 1 + n_cov
        col_week0 = col_region0 + len(regions)
        n_feat = col_week0 + len(weeks)

        rows, cols, vals = [], [], []
        idx = np.arange(n)
        rows.append(idx)
        cols.append(np.zeros(n, dtype=np.int64))
        vals.append(np.ones(n))
        for j, c in enumerate(self.covariates):
            rows.append(idx)
            cols.append(np.full(n, 1 + j, dtype=np.int64))
            vals.append(getattr(ds, c).astype(float))
        rows.append(idx)
        cols.append(np.asarray([col_region0 + region_pos[r] for r in ds.region]))
        vals.append(np.ones(n))
        rows.append(idx)
        cols.append(np.asarray([col_week0 + week_pos[int(w)] for w in ds.week]))
        vals.append(np.ones(n))
        X = sparse.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(n, n_feat)).tocsr()

        penalized = np.ones(n_feat, dtype=bool)
        penalized[0] = False  # intercept: unpenalised so price-scale shifts pass through
        beta = solve_ridge(X, ds.log_price, self.ridge_scale * n, penalized, self.cg_rtol)

        deltas = {w: float(beta[col_week0 + i]) for i, w in enumerate(weeks)}
        fitted = X @ beta
        time_part = np.asarray([deltas[int(w)] for w in ds.week])
        self.level_ = float(np.mean(fitted - time_part))
        self.coef_ = beta
        self.delta_ = deltas
        self.regions_ = regions
        self.weeks_ = weeks
        self.n_records_ = n
        self.scope_ = scope
        return self

    def index_series(self, sampling: str = "monthly", max_gap: int = 3) -> IndexSeries:
        """The hedonic index, weekly or sampled at each month's 15th."""
        check_is_fitted(self, "delta_")
        return _series_from_deltas(self.delta_, self.level_, "hedonic", self.scope_,
                                   sampling, max_gap)


class RepeatSalesIndexModel(BaseEstimator):
    """Ridge repeat-sales index on log price growth between sale pairs.

    Each pair contributes the row delta_{t2} - delta_{t1} = y2 - y1; the
    base week's delta is pinned to zero after the ridge solve, so the
    series is a pure ratio curve with H(base) = 1.

    Parameters
    ----------
    ridge_scale : float
        Penalty lambda = ridge_scale * n_pairs.
    min_gap_weeks : int
        Pairs closer than this many weeks apart are discarded.
    base_week : int or None
        Week whose delta is pinned; default the earliest paired week.
    """

    def __init__(self, ridge_scale: float = 1e-4, min_gap_weeks: int = 1,
                 base_week: int | None = None, cg_rtol: float = 1e-10):
        self.ridge_scale = ridge_scale
        self.min_gap_weeks = min_gap_weeks
        self.base_week = base_week
        self.cg_rtol = cg_rtol

    def fit(self, dataset: SalesDataset | None = None, scope: str = "all",
            pairs=None) -> "RepeatSalesIndexModel":
        if self.ridge_scale <= 0:
            raise ValueError("ridge_scale must be positive")
        if pairs is None:
            if dataset is None:
                raise DataError("fit needs a dataset or explicit pairs")
            pairs = pair_repeat_sales(dataset, self.min_gap_weeks)
        else:
            pairs = [p for p in pairs if p.t2 - p.t1 >= self.min_gap_weeks]
        if not pairs:
            raise DataError("no repeat-sale pairs to fit on")

        weeks = sorted({p.t1 for p in pairs} | {p.t2 for p in pairs})
        week_pos = {w: i for i, w in enumerate(weeks)}
        n = len(pairs)
        rows = np.repeat(np.arange(n), 2)
        cols = np.empty(2 * n, dtype=np.int64)
        vals = np.empty(2 * n)
        y = np.empty(n)
        for i, p in enumerate(pairs):
            cols[2 * i] = week_pos[p.t1]
            vals[2 * i] = -1.0
            cols[2 * i + 1] = week_pos[p.t2]
            vals[2 * i + 1] = 1.0
            y[i] = p.y2 - p.y1
        X = sparse.coo_matrix((vals, (rows, cols)), shape=(n, len(weeks))).tocsr()
        beta = solve_ridge(X, y, self.ridge_scale * n,
                           np.ones(len(weeks), dtype=bool), self.cg_rtol)

        base = self.base_week if self.base_week is not None else weeks[0]
        if base not in week_pos:
            raise DataError(f"base week {base} has no repeat-sale observation")
        beta = beta - beta[week_pos[base]]
        self.delta_ = {w: float(beta[i]) for i, w in enumerate(weeks)}
        self.weeks_ = weeks
        self.base_week_ = base
        self.n_pairs_ = n
        self.scope_ = scope
        # weeks inside the span that no pair touches simply have no sample;
        # monthly output bridges across them when the gap allows
        full = set(range(weeks[0], weeks[-1] + 1))
        self.missing_weeks_ = sorted(full - set(weeks))
        return self

    def index_series(self, sampling: str = "monthly", max_gap: int = 3) -> IndexSeries:
        """The repeat-sales ratio curve (1.0 at the base week)."""
        check_is_fitted(self, "delta_")
        return _series_from_deltas(self.delta_, 0.0, "repeat_sales", self.scope_,
                                   sampling, max_gap)
