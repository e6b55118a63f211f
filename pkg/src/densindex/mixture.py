"""One-dimensional Gaussian mixtures over log sale price.

The mixture is the common currency of the package: the density network
emits one per (feature key, week), regional densities are pooled into
metro densities, and ensemble members are pooled into a single density.
Both pooling operations are the same weighted concatenation of
components, provided here as :meth:`GaussianMixture.pool`.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp, ndtr

# Smallest variance a component is allowed to carry, in squared log-price
# units. Keeps every pdf/cdf evaluation and every gradient finite.
VARIANCE_FLOOR = 1e-6

_WEIGHT_SUM_TOL = 1e-8
_QUANTILE_TOL = 1e-12

__all__ = ["GaussianMixture", "MixtureMoments", "VARIANCE_FLOOR"]


@dataclass(frozen=True)
class MixtureMoments:
    """Summary statistics of a mixture in both log and price space."""

    mean_log: float
    median_log: float
    mean_price: float
    gmean_price: float
    median_price: float


class GaussianMixture:
    """Immutable Gaussian mixture density on the log-price line.

    Parameters
    ----------
    weights : array-like, shape (K,)
        Non-negative component weights summing to one within 1e-8.
        Stored renormalised to sum to one exactly.
    means : array-like, shape (K,)
        Component means, log-price units.
    variances : array-like, shape (K,)
        Component variances. Values below the 1e-6 floor are raised to it.
    """

    __slots__ = ("weights", "means", "variances")

    def __init__(self, weights, means, variances):
        w = np.atleast_1d(np.asarray(weights, dtype=float))
        mu = np.atleast_1d(np.asarray(means, dtype=float))
        var = np.atleast_1d(np.asarray(variances, dtype=float))
        if w.ndim != 1 or w.shape != mu.shape or w.shape != var.shape:
            raise ValueError("weights, means and variances must be 1-d arrays of equal length")
        if w.size == 0:
            raise ValueError("mixture needs at least one component")
        if not (np.isfinite(w).all() and np.isfinite(mu).all() and np.isfinite(var).all()):
            raise ValueError("mixture parameters must be finite")
        if (w < 0).any():
            raise ValueError("weights must be non-negative")
        total = w.sum()
        if abs(total - 1.0) > _WEIGHT_SUM_TOL:
            raise ValueError(f"weights must sum to one, got {total!r}")
        if (var <= 0).any():
            raise ValueError("variances must be positive")
        self.weights = w / total
        self.means = mu
        self.variances = np.maximum(var, VARIANCE_FLOOR)
        self.weights.setflags(write=False)
        self.means.setflags(write=False)
        self.variances.setflags(write=False)

    @property
    def n_components(self) -> int:
        return self.weights.size

    def __repr__(self):
        return f"GaussianMixture(K={self.n_components}, mean_log={self.mean_log():.4f})"

    def __eq__(self, other):
        if not isinstance(other, GaussianMixture):
            return NotImplemented
        return (
            np.array_equal(self.weights, other.weights)
            and np.array_equal(self.means, other.means)
            and np.array_equal(self.variances, other.variances)
        )

    def __hash__(self):
        return hash((self.weights.tobytes(), self.means.tobytes(), self.variances.tobytes()))

    # -- pointwise evaluations -------------------------------------------------

    def pdf(self, y):
        """Density at log price ``y`` (scalar or array)."""
        y = np.asarray(y, dtype=float)
        z2 = (y[..., None] - self.means) ** 2 / self.variances
        comp = np.exp(-0.5 * z2) / np.sqrt(2.0 * np.pi * self.variances)
        return comp @ self.weights

    def logpdf(self, y):
        """Log density at ``y``, computed with log-sum-exp for stability."""
        y = np.asarray(y, dtype=float)
        log_comp = (
            -0.5 * np.log(2.0 * np.pi * self.variances)
            - 0.5 * (y[..., None] - self.means) ** 2 / self.variances
        )
        return logsumexp(log_comp, axis=-1, b=self.weights)

    def cdf(self, y):
        """P(Y <= y) for log price ``y`` (scalar or array)."""
        y = np.asarray(y, dtype=float)
        sigma = np.sqrt(self.variances)
        return ndtr((y[..., None] - self.means) / sigma) @ self.weights

    def quantile(self, p):
        """Inverse cdf by bisection, resolved to 1e-12 in log price.

        The bracket [min mu - 10 max sigma, max mu + 10 max sigma] covers
        all probabilities representable at float precision.
        """
        p_arr = np.atleast_1d(np.asarray(p, dtype=float))
        if ((p_arr <= 0.0) | (p_arr >= 1.0)).any() or not np.isfinite(p_arr).all():
            raise ValueError("quantile probabilities must lie strictly inside (0, 1)")
        sigma_max = math.sqrt(self.variances.max())
        lo = np.full(p_arr.shape, self.means.min() - 10.0 * sigma_max)
        hi = np.full(p_arr.shape, self.means.max() + 10.0 * sigma_max)
        # ~90 halvings take any realistic bracket below the 1e-12 tolerance
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            below = self.cdf(mid) < p_arr
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
            if float((hi - lo).max()) <= _QUANTILE_TOL:
                break
        out = 0.5 * (lo + hi)
        return out if np.ndim(p) else float(out[0])

    # -- summaries -------------------------------------------------------------

    def mean_log(self) -> float:
        return float(self.weights @ self.means)

    def median_log(self) -> float:
        return self.quantile(0.5)

    def total_variance(self) -> float:
        """Variance of the mixture on the log scale."""
        m = self.mean_log()
        return float(self.weights @ (self.variances + self.means**2) - m * m)

    def mean_price(self) -> float:
        """E[exp(Y)]: each component contributes its lognormal mean."""
        return float(self.weights @ np.exp(self.means + 0.5 * self.variances))

    def moments(self) -> MixtureMoments:
        mean_log = self.mean_log()
        median_log = self.median_log()
        return MixtureMoments(
            mean_log=mean_log,
            median_log=median_log,
            mean_price=self.mean_price(),
            gmean_price=math.exp(mean_log),
            median_price=math.exp(median_log),
        )

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Draw ``n`` log prices."""
        comp = rng.choice(self.n_components, size=n, p=self.weights)
        return rng.normal(self.means[comp], np.sqrt(self.variances[comp]))

    # -- combination -----------------------------------------------------------

    @classmethod
    def pool(cls, mixtures, weights) -> "GaussianMixture":
        """Weighted pooling of mixtures into one mixture.

        Component lists are concatenated with each member's weights scaled
        by its (renormalised) pool weight. Serves both regional-to-metro
        aggregation and ensemble averaging.
        """
        mixtures = list(mixtures)
        w = np.asarray(weights, dtype=float)
        if len(mixtures) == 0:
            raise ValueError("nothing to pool")
        if w.shape != (len(mixtures),):
            raise ValueError("need one pool weight per mixture")
        if (w < 0).any() or not np.isfinite(w).all():
            raise ValueError("pool weights must be finite and non-negative")
        total = w.sum()
        if total <= 0:
            raise ValueError("pool weights must not all be zero")
        w = w / total
        keep = w > 0
        return cls(
            np.concatenate([m.weights * wi for m, wi in zip(mixtures, w) if wi > 0]),
            np.concatenate([m.means for m, k in zip(mixtures, keep) if k]),
            np.concatenate([m.variances for m, k in zip(mixtures, keep) if k]),
        )

    # -- serialisation ---------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "components": [
                {"w": float(w), "mu": float(mu), "var": float(var)}
                for w, mu, var in zip(self.weights, self.means, self.variances)
            ]
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "GaussianMixture":
        comps = payload["components"]
        return cls(
            [c["w"] for c in comps],
            [c["mu"] for c in comps],
            [c["var"] for c in comps],
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "GaussianMixture":
        return cls.from_dict(json.loads(text))
