"""Gaussian terminal reference measures, optionally conditioned on y.

All kinds share a diagonal covariance, so the score is always
``(mean(y) - x) / variance``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import DegenerateEnsemble, InvalidArgument
from .rng import stream

ISO = "iso-gaussian"
COND = "cond-gaussian-from-y"
LEARNED = "learned-mean"
ENKF = "enkf-gaussian"

VARIANCE_FLOOR = 1e-8


@dataclass(frozen=True)
class RefMeasure:
    kind: str
    mean_vec: np.ndarray
    variance: np.ndarray
    mean_map: Optional[Callable] = None
    inflation: float = 1.0

    is_gaussian = True

    def __post_init__(self):
        var = np.asarray(self.variance, dtype=float).reshape(-1)
        if np.any(var <= 0) or not np.all(np.isfinite(var)):
            raise InvalidArgument("reference variances must be strictly positive")
        if self.inflation <= 0:
            raise InvalidArgument("variance inflation must be positive")
        object.__setattr__(self, "variance", np.maximum(var, VARIANCE_FLOOR))
        object.__setattr__(self, "mean_vec", np.asarray(self.mean_vec, dtype=float).reshape(-1))

    @property
    def d(self) -> int:
        return self.variance.size

    @property
    def conditional(self) -> bool:
        return self.mean_map is not None

    def mean(self, y=None, count: int | None = None) -> np.ndarray:
        """Per-row means, shape (M, d)."""
        if self.mean_map is None:
            m = count if count is not None else (1 if y is None else np.atleast_2d(y).shape[0])
            return np.broadcast_to(self.mean_vec, (m, self.d)).copy()
        if y is None or np.size(y) == 0:
            raise InvalidArgument(f"{self.kind} reference needs a condition y")
        y = np.atleast_2d(np.asarray(y, dtype=float))
        out = np.asarray(self.mean_map(y), dtype=float).reshape(y.shape[0], self.d)
        if count is not None and out.shape[0] == 1 and count > 1:
            out = np.broadcast_to(out, (count, self.d)).copy()
        return out

    def sample(self, y, count: int, seed: int) -> np.ndarray:
        mu = self.mean(y, count)
        if mu.shape[0] != count:
            raise InvalidArgument(f"got {mu.shape[0]} conditions for {count} draws")
        z = stream(seed, "ref").standard_normal((count, self.d))
        return mu + np.sqrt(self.variance) * z

    def score(self, x, y=None) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return (self.mean(y, x.shape[0]) - x) / self.variance

    def log_density(self, x, y=None) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        r = x - self.mean(y, x.shape[0])
        return -0.5 * ((r * r) / self.variance + np.log(2.0 * np.pi * self.variance)).sum(1)

    def with_inflation(self, rho: float) -> "RefMeasure":
        return RefMeasure(self.kind, self.mean_vec, self.variance / self.inflation * rho,
                          self.mean_map, rho)


def iso_gaussian(mean, variance, d: int | None = None) -> RefMeasure:
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    var = np.atleast_1d(np.asarray(variance, dtype=float))
    d = d or max(mean.size, var.size)
    return RefMeasure(ISO, np.broadcast_to(mean, (d,)).copy(), np.broadcast_to(var, (d,)).copy())


def cond_gaussian_from_y(mean_map: Callable | str, variance, d: int, inflation: float = 1.0) -> RefMeasure:
    """``N(x; mean_map(y), inflation * variance)``; ``mean_map="identity"`` uses y itself."""
    fn = (lambda y: y) if mean_map == "identity" else mean_map
    var = np.broadcast_to(np.asarray(variance, dtype=float), (d,)) * inflation
    return RefMeasure(COND, np.zeros(d), var, fn, inflation)


def conditional_variance(x, y, mean_map: Callable) -> np.ndarray:
    """Per-dimension sample variance of ``X - mean_map(Y)`` over a joint sample."""
    resid = np.atleast_2d(x) - np.asarray(mean_map(np.atleast_2d(y)))
    return resid.var(0, ddof=1)


@dataclass(frozen=True)
class _RidgeMean:
    cfg: object
    weights: np.ndarray

    def __call__(self, y):
        from .approx import build_features

        y = np.atleast_2d(y)
        return build_features(y, np.zeros((y.shape[0], 0)), self.cfg) @ self.weights


def learned_mean(x, y, n_rbf: int = 0, seed: int = 0, inflation: float = 1.0,
                 bandwidth_rule: str = "median", bandwidth_scale: float = 1.0) -> RefMeasure:
    """Regress E[X | Y] on features of y; variance is the residual variance times ``inflation``."""
    from .approx import build_features, ridge_fit_retry, select_features

    y = np.atleast_2d(np.asarray(y, dtype=float))
    x = np.atleast_2d(np.asarray(x, dtype=float))
    cfg = select_features(y, np.zeros((y.shape[0], 0)), n_rbf, seed,
                          bandwidth_rule=bandwidth_rule, bandwidth_scale=bandwidth_scale)
    w, _ = ridge_fit_retry(build_features(y, np.zeros((y.shape[0], 0)), cfg), x, label="ref mean")
    fn = _RidgeMean(cfg, w)
    var = conditional_variance(x, y, fn) * inflation
    return RefMeasure(LEARNED, np.zeros(x.shape[1]), var, fn, inflation)


@dataclass(frozen=True)
class _AffineMean:
    center: np.ndarray
    y_center: np.ndarray
    gain: np.ndarray

    def __call__(self, y):
        return self.center + (np.atleast_2d(y) - self.y_center) @ self.gain.T


def estimate_from_ensemble(particles, inflation: float = 1.0, gain=None, y_center=None) -> RefMeasure:
    """Gaussian with the ensemble's mean and unbiased per-dimension variance times ``inflation``.

    When ``gain`` is given the mean becomes the affine map
    ``mean + gain (y - y_center)``, i.e. the analysis mean an ensemble Kalman
    update would produce for observation y.
    """
    p = np.atleast_2d(np.asarray(particles, dtype=float))
    if p.shape[0] < 2:
        raise InvalidArgument("need at least two particles to estimate a variance")
    var = p.var(0, ddof=1)
    if np.all(var == 0):
        raise DegenerateEnsemble("all particles are identical")
    mean = p.mean(0)
    var = np.maximum(var * inflation, VARIANCE_FLOOR)
    fn = None
    if gain is not None:
        fn = _AffineMean(mean, np.asarray(y_center, dtype=float).reshape(-1), np.asarray(gain, dtype=float))
    return RefMeasure(ENKF, mean, var, fn, inflation)


def sample_ref(ref: RefMeasure, y, count: int, seed: int) -> np.ndarray:
    if ref.conditional and (y is None or np.size(y) == 0):
        raise InvalidArgument(f"{ref.kind} reference needs a condition y")
    return ref.sample(y, count, seed)


def log_density_and_score(ref: RefMeasure, x, y=None):
    return ref.log_density(x, y), ref.score(x, y)
