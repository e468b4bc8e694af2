"""Sequential data assimilation: EnKF, bootstrap particle filter and per-step bridges.

Every method runs on the same :class:`~cdsb.problems.TwinData`, starts from
``N(init_mean, init_var I)`` and, at each step, propagates the ensemble
through the transition before assimilating the observation of that step.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import bridge
from .approx import RESIDUAL, select_features
from .chain import LANGEVIN, linear_schedule
from .errors import CDSBError, InvalidArgument, NumericalBlowup
from .problems import JointProblem, StateSpaceModel, TwinData
from .refmeasure import VARIANCE_FLOOR, estimate_from_ensemble
from .rng import child_seed, stream

log = logging.getLogger(__name__)

ENKF = "enkf"
PF = "pf"
CSGM = "csgm"
CDSB = "cdsb"
CSGM_C = "csgm-c"
CDSB_C = "cdsb-c"
BRIDGE_VARIANTS = (CSGM, CDSB, CSGM_C, CDSB_C)

MIN_FIT_SIZE = 50
# a filter that has lost the state sits at attractor-scale errors; Lorenz-63
# never reaches RMSE 50, so the threshold is set at 2.5 observation std devs
DIVERGENCE_RMSE = 5.0
DIVERGENCE_STEPS = 10


@dataclass(frozen=True)
class EnsembleState:
    particles: np.ndarray
    t: int = 0
    tag: str = ENKF

    def __post_init__(self):
        p = np.atleast_2d(np.asarray(self.particles, dtype=float))
        if p.shape[0] < 2:
            raise InvalidArgument("an ensemble needs at least two particles")
        if not np.all(np.isfinite(p)):
            raise NumericalBlowup(f"non-finite particles at t={self.t}")
        object.__setattr__(self, "particles", p)

    @property
    def size(self) -> int:
        return self.particles.shape[0]


def initial_ensemble(twin: TwinData, count: int, seed: int, tag: str = ENKF) -> EnsembleState:
    rng = stream(seed, "init-ensemble")
    x = twin.init_mean + np.sqrt(twin.model.init_var) * rng.standard_normal((count, twin.model.d))
    return EnsembleState(x, 0, tag)


# ---------------------------------------------------------------------------
# EnKF
# ---------------------------------------------------------------------------


def kalman_gain(forecast, obs_var: float, inflation: float = 1.0) -> np.ndarray:
    """Gain ``C (C + R)^{-1}`` for an identity observation operator."""
    c = np.atleast_2d(np.cov(forecast, rowvar=False)) * inflation
    c = c + VARIANCE_FLOOR * np.eye(c.shape[0])
    r = obs_var * np.eye(c.shape[0])
    return np.linalg.solve(c + r, c).T


def enkf_analysis(forecast, y_obs, obs_var: float, inflation: float, rng):
    """Perturbed-observation update; returns ``(analysis, gain)``."""
    forecast = np.atleast_2d(forecast)
    mean = forecast.mean(0)
    x = mean + np.sqrt(inflation) * (forecast - mean)
    gain = kalman_gain(forecast, obs_var, inflation)
    y_pert = np.asarray(y_obs, dtype=float).reshape(1, -1) + np.sqrt(obs_var) * rng.standard_normal(x.shape)
    out = x + (y_pert - x) @ gain.T
    if not np.all(np.isfinite(out)):
        raise NumericalBlowup("EnKF update produced non-finite particles")
    return out, gain


def enkf_step(ens: EnsembleState, y_obs, model: StateSpaceModel, inflation: float = 1.0,
              seed: int = 0) -> EnsembleState:
    rng = stream(seed, "enkf", ens.t)
    forecast = model.propagate(ens.particles, rng)
    analysis, _ = enkf_analysis(forecast, y_obs, model.obs_var, inflation, rng)
    return EnsembleState(analysis, ens.t + 1, ENKF)


# ---------------------------------------------------------------------------
# Bootstrap particle filter
# ---------------------------------------------------------------------------


def systematic_resample(weights, rng) -> np.ndarray:
    """Indices drawn by systematic resampling from normalized ``weights``."""
    w = np.asarray(weights, dtype=float)
    n = w.size
    pos = (rng.random() + np.arange(n)) / n
    cum = np.cumsum(w)
    cum[-1] = 1.0
    return np.searchsorted(cum, pos, side="right")


@dataclass(frozen=True)
class OracleMoments:
    means: np.ndarray
    stds: np.ndarray
    n_particles: int


def pf_oracle(model: StateSpaceModel, observations, init_mean, n_particles: int, seed: int) -> OracleMoments:
    """Bootstrap particle filter with systematic resampling at every step.

    Moments are taken from the weighted ensemble before resampling.
    """
    obs = np.atleast_2d(np.asarray(observations, dtype=float))
    rng = stream(seed, "pf")
    x = np.asarray(init_mean, float) + np.sqrt(model.init_var) * rng.standard_normal((n_particles, model.d))
    means = np.empty((obs.shape[0], model.d))
    stds = np.empty_like(means)
    for t, y in enumerate(obs):
        x = model.propagate(x, rng)
        logw = model.obs_logpdf(y, x)
        logw -= logw.max()
        w = np.exp(logw)
        total = w.sum()
        if not np.isfinite(total) or total <= 0:
            raise NumericalBlowup(f"particle weights collapsed at t={t}")
        w /= total
        mu = w @ x
        means[t] = mu
        stds[t] = np.sqrt(np.maximum(w @ (x - mu) ** 2, 0.0))
        x = x[systematic_resample(w, rng)]
    return OracleMoments(means, stds, n_particles)


def kalman_filter_1d(a: float, trans_var: float, obs_var: float, observations, m0: float, v0: float):
    """Exact scalar Kalman filter means and variances (reference for linear models)."""
    m, v = m0, v0
    means, variances = [], []
    for y in np.asarray(observations, dtype=float).reshape(-1):
        m, v = a * m, a * a * v + trans_var
        k = v / (v + obs_var)
        m, v = m + k * (y - m), (1 - k) * v
        means.append(m)
        variances.append(v)
    return np.array(means), np.array(variances)


# ---------------------------------------------------------------------------
# Bridge assimilation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EmpiricalJoint(JointProblem):
    """The forecast pairs ``(X^i, Y^i)`` as a joint distribution; draws cycle through them."""

    x: np.ndarray
    y: np.ndarray
    name: str = "empirical"

    @property
    def d(self) -> int:
        return self.x.shape[1]

    @property
    def d_y(self) -> int:
        return self.y.shape[1]

    def sample_joint(self, count: int, seed: int):
        m = self.x.shape[0]
        idx = np.concatenate([stream(seed, "empirical", r).permutation(m)
                              for r in range(-(-count // m))])[:count]
        return self.x[idx], self.y[idx]


@dataclass(frozen=True)
class AssimilationConfig:
    """Per-step bridge settings; ``long`` selects the 100-step chain with halved max step."""

    long: bool = False
    n_short: int = 20
    n_long: int = 100
    gamma_min: float = 0.0005
    gamma_max: float = 0.05
    n_rbf: int = 3
    paths_per_particle: int = 1
    cdsb_iterations: int = 5
    inflation: float = 1.0
    ref_inflation: float = 1.0
    scale_by_ref: bool = True

    @property
    def n_steps(self) -> int:
        return self.n_long if self.long else self.n_short

    @property
    def gamma_top(self) -> float:
        return self.gamma_max / 2 if self.long else self.gamma_max


def _variant_ref(variant, forecast, y_fc, y_obs, model, cfg, rng):
    if variant in (CSGM, CDSB):
        return estimate_from_ensemble(forecast, cfg.ref_inflation)
    analysis, gain = enkf_analysis(forecast, y_obs, model.obs_var, cfg.inflation, rng)
    return estimate_from_ensemble(analysis, cfg.ref_inflation, gain=gain, y_center=y_obs)


def cdsb_assimilate(ens: EnsembleState, y_obs, model: StateSpaceModel, variant: str,
                    cfg: AssimilationConfig = AssimilationConfig(), seed: int = 0) -> EnsembleState:
    """Propagate, simulate observations, fit a bridge on the pairs and sample at ``y_obs``."""
    if variant not in BRIDGE_VARIANTS:
        raise InvalidArgument(f"unknown variant {variant!r}")
    rng = stream(seed, "assim", variant, ens.t)
    if ens.size < MIN_FIT_SIZE:
        log.warning("ensemble of %d is below the minimum fit size; using the EnKF update", ens.size)
        return replace(enkf_step(ens, y_obs, model, cfg.inflation, child_seed(seed, "fallback", ens.t)),
                       tag=variant)
    forecast = model.propagate(ens.particles, rng)
    y_fc = model.observe(forecast, rng)
    ref = _variant_ref(variant, forecast, y_fc, np.asarray(y_obs, float), model, cfg, rng)
    sched = linear_schedule(cfg.n_steps, cfg.gamma_min, cfg.gamma_top,
                            scale=ref.variance if cfg.scale_by_ref else None)
    bcfg = bridge.BridgeConfig(
        iterations=1 if variant in (CSGM, CSGM_C) else cfg.cdsb_iterations,
        rows_per_fit=ens.size * cfg.paths_per_particle, n_rbf=cfg.n_rbf,
        parameterization=RESIDUAL, fit_final_forward=False)
    features = select_features(forecast, y_fc, cfg.n_rbf, child_seed(seed, "features", ens.t))
    bcfg = replace(bcfg, features=features)
    problem = EmpiricalJoint(forecast, y_fc)
    fit_seed = child_seed(seed, "fit", variant, ens.t)
    state = bridge.run_cdsb(problem, sched, ref, bcfg, fit_seed, initial_drift=LANGEVIN)
    post = bridge.sample_posterior(state, y_obs, ens.size, child_seed(fit_seed, "sample"))
    return EnsembleState(post, ens.t + 1, variant)


# ---------------------------------------------------------------------------
# Filtering runs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FilterReport:
    method: str
    seed: int
    means: np.ndarray
    stds: np.ndarray
    rmse_oracle: float
    rmse_truth: float
    std_rmse: float
    diverged: bool
    divergence_step: int | None = None
    step_rmse: np.ndarray = field(default=None, repr=False)

    def metrics(self) -> dict:
        return {"rmse_oracle": self.rmse_oracle, "rmse_truth": self.rmse_truth,
                "std_rmse": self.std_rmse, "diverged": float(self.diverged)}


def _rmse(a, b) -> float:
    return float(np.sqrt(np.mean((np.asarray(a) - np.asarray(b)) ** 2)))


def divergence_step(step_rmse, threshold: float = DIVERGENCE_RMSE, run: int = DIVERGENCE_STEPS):
    """First step of the first run of ``run`` consecutive steps with RMSE above ``threshold``.

    Non-finite RMSE counts as above the threshold.
    """
    count = 0
    for t, r in enumerate(np.asarray(step_rmse, dtype=float)):
        count = count + 1 if not (r <= threshold) else 0
        if count >= run:
            return t - run + 1
    return None


def run_filter(twin: TwinData, method: str, n_particles: int, oracle: OracleMoments, seed: int,
               cfg: AssimilationConfig = AssimilationConfig(), progress=None,
               divergence_threshold: float = DIVERGENCE_RMSE) -> FilterReport:
    """Filter the whole window with one method and score it against the oracle and truth.

    A failure at step t (non-finite particles, failed fit) marks the run as
    diverged from t on; later steps are filled with NaN.
    """
    model = twin.model
    horizon = twin.horizon
    ens = initial_ensemble(twin, n_particles, child_seed(seed, "init"), method)
    means = np.full((horizon, model.d), np.nan)
    stds = np.full((horizon, model.d), np.nan)
    failed_at = None
    for t in range(horizon):
        y = twin.observations[t]
        try:
            if method == ENKF:
                ens = enkf_step(ens, y, model, cfg.inflation, child_seed(seed, "enkf"))
            else:
                ens = cdsb_assimilate(ens, y, model, method, cfg, child_seed(seed, "bridge"))
        except (CDSBError, np.linalg.LinAlgError, FloatingPointError) as exc:
            log.info("%s failed at t=%d: %s", method, t, exc)
            failed_at = t
            break
        means[t] = ens.particles.mean(0)
        stds[t] = ens.particles.std(0, ddof=1)
        if progress:
            progress(t, ens)
    step_rmse = np.sqrt(np.mean((means - twin.states) ** 2, axis=1))
    step_rmse[np.isnan(step_rmse)] = np.inf
    div = divergence_step(step_rmse, divergence_threshold)
    if failed_at is not None:
        div = failed_at if div is None else min(div, failed_at)
    diverged = div is not None
    if diverged:
        nan = float("inf")
        return FilterReport(method, seed, means, stds, nan, nan, nan, True, div, step_rmse)
    return FilterReport(method, seed, means, stds, _rmse(means, oracle.means), _rmse(means, twin.states),
                        _rmse(stds, oracle.stds), False, None, step_rmse)
