"""Independent reference computations used to validate fitted bridges.

Everything here is a pure function of its inputs: log-domain Sinkhorn,
grid quadrature for the BOD posterior, sample moment statistics and
one-dimensional Wasserstein distances.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import optimize, stats
from scipy.special import logsumexp

from .chain import BROWNIAN, OU, InitialDrift, Schedule
from .errors import InvalidArgument, InvalidGrid, UndefinedMoments, UnsupportedProblem
from .problems import bod_mean, canonical_bod_observation, BOD_NOISE_VAR


# ---------------------------------------------------------------------------
# Entropic optimal transport
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DiscreteCoupling:
    support_a: np.ndarray
    support_b: np.ndarray
    a: np.ndarray
    b: np.ndarray
    cost: np.ndarray
    epsilon: float
    plan: np.ndarray
    iterations: int
    converged: bool
    violation: float


def _check_prob(v, name):
    v = np.asarray(v, dtype=float).reshape(-1)
    if v.size == 0 or np.any(v <= 0) or not np.isclose(v.sum(), 1.0, atol=1e-9):
        raise InvalidArgument(f"{name} must be a strictly positive probability vector")
    return v


def sinkhorn(a, b, cost, epsilon: float, max_iters: int = 10_000, tol: float = 1e-9,
             support_a=None, support_b=None) -> DiscreteCoupling:
    """Entropic OT plan ``diag(u) K diag(v)`` with ``K = exp(-cost / epsilon)``.

    Iterates in the log domain on the dual potentials.  Stops once the
    largest row or column sum violation drops below ``tol``; if that never
    happens the last iterate is returned with ``converged=False``.
    """
    a = _check_prob(a, "a")
    b = _check_prob(b, "b")
    cost = np.asarray(cost, dtype=float)
    if cost.shape != (a.size, b.size):
        raise InvalidArgument(f"cost must have shape {(a.size, b.size)}, got {cost.shape}")
    if not epsilon > 0:
        raise InvalidArgument("epsilon must be positive")
    log_k = -cost / epsilon
    la, lb = np.log(a), np.log(b)
    f = np.zeros(a.size)
    g = np.zeros(b.size)
    viol = np.inf
    it = 0
    for it in range(1, max_iters + 1):
        f = la - logsumexp(log_k + g[None, :], axis=1)
        g = lb - logsumexp(log_k + f[:, None], axis=0)
        # columns are exact after the g update, so only rows can be off
        rows = np.exp(logsumexp(log_k + f[:, None] + g[None, :], axis=1))
        viol = float(np.abs(rows - a).max())
        if viol < tol:
            break
    plan = np.exp(log_k + f[:, None] + g[None, :])
    viol = max(float(np.abs(plan.sum(1) - a).max()), float(np.abs(plan.sum(0) - b).max()))
    sa = np.arange(a.size, dtype=float) if support_a is None else np.asarray(support_a, dtype=float)
    sb = np.arange(b.size, dtype=float) if support_b is None else np.asarray(support_b, dtype=float)
    return DiscreteCoupling(sa, sb, a, b, cost, float(epsilon), plan, it, viol < tol, viol)


def brute_force_2x2(a, b, cost, epsilon: float) -> np.ndarray:
    """Solve the 2x2 scaling equations ``u_i (K v)_i = a_i, v_j (K^T u)_j = b_j`` directly.

    The scaling pair is fixed up to ``u -> c u, v -> v / c``, so ``u_0 = 1``
    and the remaining three unknowns are found by a nonlinear root solve.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    k = np.exp(-np.asarray(cost, dtype=float) / epsilon)

    def eqs(z):
        u = np.array([1.0, np.exp(z[0])])
        v = np.exp(z[1:])
        return np.concatenate([(u * (k @ v))[1:] - a[1:], v * (k.T @ u) - b])

    z = optimize.fsolve(eqs, np.zeros(3), xtol=1e-14)
    u = np.array([1.0, np.exp(z[0])])
    v = np.exp(z[1:])
    return u[:, None] * k * v[None, :]


# ---------------------------------------------------------------------------
# Static bridge check on a 1-D Gaussian slice
# ---------------------------------------------------------------------------


def chain_transition(drift: InitialDrift, schedule: Schedule, y=None):
    """Coefficients ``(slope, offset, var)`` of ``X_N | X_0`` for an affine 1-D initial chain."""
    if not drift.is_affine():
        raise UnsupportedProblem("closed-form chain kernel needs an affine initial drift")
    slope, offset, var = 1.0, 0.0, 0.0
    for k in range(schedule.n_steps):
        g = float(np.reshape(schedule.step(k + 1, 1), -1)[0])
        if drift.kind == OU:
            a, c = 1.0 - g, 0.0
        elif drift.kind == BROWNIAN:
            a, c = 1.0, 0.0
        else:
            ref = drift.ref
            mu = float(ref.mean(None if not ref.conditional else np.atleast_2d(y), 1)[0, 0])
            v = float(ref.variance[0])
            a, c = 1.0 - g / v, g * mu / v
        slope, offset, var = a * slope, a * offset + c, a * a * var + 2.0 * g
    return slope, offset, var


def _cells(center: float, sd: float, bins: int, width: float):
    edges = np.linspace(center - width * sd, center + width * sd, bins + 1)
    return edges, 0.5 * (edges[1:] + edges[:-1])


@dataclass(frozen=True)
class StaticBridgeReport:
    tv: float
    sinkhorn_converged: bool
    off_grid_mass: float
    empirical: np.ndarray
    reference: np.ndarray
    edges0: np.ndarray
    edges_n: np.ndarray


def static_bridge_check(posterior, ref_mean: float, ref_var: float, drift: InitialDrift,
                        schedule: Schedule, x0, xn, bins: int = 60, width: float = 6.0,
                        y=None, max_off_grid: float = 1e-3) -> StaticBridgeReport:
    """Compare the empirical endpoint coupling of a bridge with the static bridge on a grid.

    ``posterior`` is the time-0 marginal (anything with ``mean``, ``var`` and
    ``cdf``), the time-N marginal is ``N(ref_mean, ref_var)``.  Cell masses
    come from cdf differences; the kernel is the closed-form Gaussian
    ``X_N | X_0`` of the initial chain and Sinkhorn runs with ``epsilon = 1``
    on the cost ``-log p(x_N | x_0)``.
    """
    m0 = float(np.reshape(posterior.mean, -1)[0])
    s0 = float(np.sqrt(np.reshape(posterior.var, -1)[0]))
    sn = float(np.sqrt(ref_var))
    e0, c0 = _cells(m0, s0, bins, width)
    en, cn = _cells(ref_mean, sn, bins, width)
    a = np.diff(posterior.cdf(e0))
    b = np.diff(stats.norm.cdf(en, ref_mean, sn))
    off = max(1.0 - a.sum(), 1.0 - b.sum())
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    xn = np.asarray(xn, dtype=float).reshape(-1)
    emp_off = 1.0 - np.mean((x0 >= e0[0]) & (x0 <= e0[-1]) & (xn >= en[0]) & (xn <= en[-1]))
    if off > max_off_grid:
        raise InvalidGrid(f"grid misses {off:.2e} of marginal mass")
    a = np.maximum(a, 1e-300)
    b = np.maximum(b, 1e-300)
    a, b = a / a.sum(), b / b.sum()
    slope, offset, var = chain_transition(drift, schedule, y)
    cost = (cn[None, :] - slope * c0[:, None] - offset) ** 2 / (2.0 * var)
    cp = sinkhorn(a, b, cost, 1.0, max_iters=20_000, tol=1e-10, support_a=c0, support_b=cn)
    hist, _, _ = np.histogram2d(x0, xn, bins=[e0, en])
    hist = hist / x0.size
    tv = 0.5 * float(np.abs(hist - cp.plan).sum())
    return StaticBridgeReport(tv, cp.converged, float(max(off, emp_off)), hist, cp.plan, e0, en)


# ---------------------------------------------------------------------------
# Moments and distances
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MomentStats:
    mean: np.ndarray
    var: np.ndarray
    skew: np.ndarray
    kurt: np.ndarray

    def as_dict(self) -> dict:
        return {k: np.asarray(getattr(self, k)).tolist() for k in ("mean", "var", "skew", "kurt")}

    def stacked(self) -> np.ndarray:
        return np.stack([self.mean, self.var, self.skew, self.kurt])


def moment_stats(samples) -> MomentStats:
    """Mean, unbiased variance, skewness and plain (non-excess) kurtosis per column."""
    x = np.asarray(samples, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] < 4:
        raise InvalidArgument("need at least four samples")
    mean = x.mean(0)
    c = x - mean
    m2 = (c * c).mean(0)
    if np.any(m2 == 0):
        raise UndefinedMoments("zero variance column")
    m3 = (c ** 3).mean(0)
    m4 = (c ** 4).mean(0)
    return MomentStats(mean, x.var(0, ddof=1), m3 / m2 ** 1.5, m4 / m2 ** 2)


def weighted_moments(points, weights) -> MomentStats:
    w = np.asarray(weights, dtype=float)
    w = w / w.sum()
    x = np.asarray(points, dtype=float)
    mean = w @ x
    c = x - mean
    m2 = w @ (c * c)
    return MomentStats(mean, m2, (w @ c ** 3) / m2 ** 1.5, (w @ c ** 4) / m2 ** 2)


def w1_distance_1d(a, b=None, ppf=None, n_quad: int = 20_000) -> float:
    """W1 between sample sets, or between samples and a distribution given by its quantile function."""
    a = np.sort(np.asarray(a, dtype=float).reshape(-1))
    if a.size == 0:
        raise InvalidArgument("empty sample set")
    if ppf is not None:
        # integrate |F_a^{-1}(u) - ppf(u)| on a midpoint grid fine enough for the sample quantiles
        n = max(n_quad, a.size)
        u = (np.arange(n) + 0.5) / n
        qa = a[np.minimum((u * a.size).astype(int), a.size - 1)]
        return float(np.mean(np.abs(qa - np.asarray(ppf(u), dtype=float))))
    b = np.sort(np.asarray(b, dtype=float).reshape(-1))
    if b.size == 0:
        raise InvalidArgument("empty sample set")
    if a.size == b.size:
        return float(np.mean(np.abs(a - b)))
    return float(stats.wasserstein_distance(a, b))


# ---------------------------------------------------------------------------
# BOD quadrature
# ---------------------------------------------------------------------------


def bod_log_posterior_grid(y, n: int = 401, half_width: float = 6.0, likelihood: bool = True):
    """Unnormalized log posterior on an ``n x n`` grid over ``[-w, w]^2``."""
    t = np.linspace(-half_width, half_width, n)
    x1, x2 = np.meshgrid(t, t, indexing="ij")
    pts = np.stack([x1.ravel(), x2.ravel()], axis=1)
    logp = -0.5 * (pts * pts).sum(1)
    if likelihood:
        r = np.asarray(y, dtype=float).reshape(1, -1) - bod_mean(pts)
        logp = logp - 0.5 * (r * r).sum(1) / BOD_NOISE_VAR
    return t, pts, logp


def bod_moments_quadrature(y=None, n: int = 401, half_width: float = 6.0,
                           likelihood: bool = True, boundary_tol: float = 1e-4) -> MomentStats:
    """Posterior moments of (x1, x2) given y by Riemann sums on a square grid."""
    if n < 400:
        raise InvalidGrid("quadrature needs at least 400 points per axis")
    y = canonical_bod_observation() if y is None else y
    t, pts, logp = bod_log_posterior_grid(y, n, half_width, likelihood)
    w = np.exp(logp - logp.max())
    w /= w.sum()
    grid = w.reshape(n, n)
    edge = grid[0].sum() + grid[-1].sum() + grid[:, 0].sum() + grid[:, -1].sum()
    if edge > boundary_tol:
        raise InvalidGrid(f"posterior mass {edge:.2e} on the grid boundary")
    return weighted_moments(pts, w)
