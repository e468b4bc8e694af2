"""Iterative proportional fitting of conditional diffusion Schrödinger bridges.

A bridge state holds a pair of fitted mean maps: ``backward`` (``B(k, x, y)``
for k = 1..N) and ``forward`` (``F(k, x, y)`` for k = 0..N-1).  Each IPF
iteration fits ``B`` to reverse the current forward process started at the
joint data distribution, then fits ``F`` to reverse ``B`` started at the
reference measure.  The first backward fit against the initial forward
process is the conditional score-based model (CSGM).
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import approx
from .approx import MlpSpec, RESIDUAL
from .chain import (BACKWARD, FORWARD, InitialDrift, Schedule, Trajectory, run_to_end, simulate_chain)
from .errors import FitError, InvalidArgument, StateError, UnsupportedProblem
from .problems import JointProblem
from .refmeasure import RefMeasure
from .rng import child_seed, stream

log = logging.getLogger(__name__)

RIDGE = "ridge"
MLP = "mlp"


@dataclass(frozen=True)
class BridgeConfig:
    """Training budgets and approximator settings for one bridge."""

    iterations: int = 5
    approximator: str = RIDGE
    rows_per_fit: int = 100_000
    n_rbf: int = 0
    include_linear: bool = True
    bandwidth_rule: str = "median"
    bandwidth_scale: float = 1.0
    ridge_lambda: Optional[float] = None
    parameterization: str = RESIDUAL
    mlp: MlpSpec = field(default_factory=MlpSpec)
    warm_start: bool = True
    fit_final_forward: bool = True
    features: Optional[approx.FeatureConfig] = None

    def __post_init__(self):
        if self.iterations < 1:
            raise InvalidArgument("at least one IPF iteration is required")
        if self.approximator not in (RIDGE, MLP):
            raise InvalidArgument(f"unknown approximator {self.approximator!r}")
        if self.rows_per_fit < 1:
            raise InvalidArgument("rows_per_fit must be positive")


@dataclass(frozen=True)
class RegressionDataset:
    """Regression rows grouped by time index.

    ``x_in[i]``, ``targets[i]`` hold the rows whose input time index is
    ``ks[i]``; the conditions ``y`` are shared by every block.
    """

    direction: str
    ks: np.ndarray
    x_in: np.ndarray
    y: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        if not (np.all(np.isfinite(self.x_in)) and np.all(np.isfinite(self.targets))):
            raise InvalidArgument("regression rows must be finite")

    def block(self, k: int):
        i = int(np.flatnonzero(self.ks == k)[0])
        return self.x_in[i], self.y, self.targets[i]

    def rows(self):
        """Flat ``(k, x_in, y, target)`` arrays."""
        n_k, m, _ = self.x_in.shape
        kk = np.repeat(self.ks, m)
        return (kk, self.x_in.reshape(n_k * m, -1), np.tile(self.y, (n_k, 1)),
                self.targets.reshape(n_k * m, -1))


def backward_targets(traj: Trajectory, forward) -> RegressionDataset:
    """Rows ``(k+1, X_{k+1}, y) -> X_{k+1} + F(k, X_k) - F(k, X_{k+1})``."""
    if traj.direction != FORWARD:
        raise InvalidArgument("backward targets need a forward trajectory")
    n = traj.schedule.n_steps
    y = traj.conditions
    s = traj.states
    targets = np.empty((n,) + s.shape[1:])
    for k in range(n):
        x, xp = s[k], s[k + 1]
        targets[k] = xp + forward.mean(k, x, y) - forward.mean(k, xp, y)
    return RegressionDataset(BACKWARD, np.arange(1, n + 1), np.array(s[1:]), y, targets)


def forward_targets(traj: Trajectory, backward) -> RegressionDataset:
    """Rows ``(k, X_k, y) -> X_k + B(k+1, X_{k+1}) - B(k+1, X_k)``."""
    if traj.direction != BACKWARD:
        raise InvalidArgument("forward targets need a backward trajectory")
    n = traj.schedule.n_steps
    y = traj.conditions
    s = traj.states
    targets = np.empty((n,) + s.shape[1:])
    for k in range(n):
        x, xp = s[k], s[k + 1]
        targets[k] = x + backward.mean(k + 1, xp, y) - backward.mean(k + 1, x, y)
    return RegressionDataset(FORWARD, np.arange(0, n), np.array(s[:-1]), y, targets)


@dataclass(frozen=True)
class IpfState:
    schedule: Schedule
    ref: RefMeasure
    initial_drift: InitialDrift
    config: BridgeConfig
    iteration: int = 0
    forward: object = None
    forward_prev: object = None
    backward: object = None
    history: tuple = ()

    def __post_init__(self):
        if self.forward is None:
            object.__setattr__(self, "forward", self.initial_drift)

    @property
    def fitted(self) -> bool:
        return self.backward is not None

    @property
    def both_fitted(self) -> bool:
        return self.backward is not None and not isinstance(self.forward, InitialDrift)


def init_state(schedule: Schedule, ref: RefMeasure, config: BridgeConfig,
               initial_drift: InitialDrift | str | None = None) -> IpfState:
    from .chain import LANGEVIN, OU

    if initial_drift is None:
        initial_drift = LANGEVIN if (ref.conditional or np.any(ref.mean_vec != 0)
                                     or np.any(ref.variance != 1)) else OU
    if isinstance(initial_drift, str):
        initial_drift = InitialDrift(initial_drift, schedule, ref if initial_drift == LANGEVIN else None)
    return IpfState(schedule, ref, initial_drift, config)


@dataclass(frozen=True)
class Diagnostics:
    iteration: int
    direction: str
    mean_loss: float
    wall_time: float


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------


def _simulate_for(state: IpfState, which: str, problem: JointProblem, rows: int, seed: int) -> Trajectory:
    if which == BACKWARD:
        x0, y = problem.sample_joint(rows, child_seed(seed, "joint"))
        return simulate_chain(x0, y, state.forward, state.schedule, child_seed(seed, "noise"), FORWARD)
    _, y = problem.sample_joint(rows, child_seed(seed, "obs"))
    xn = state.ref.sample(y if state.ref.conditional else None, rows, child_seed(seed, "ref"))
    return simulate_chain(xn, y, state.backward, state.schedule, child_seed(seed, "noise"), BACKWARD)


def build_dataset(state: IpfState, which: str, problem: JointProblem, rows: int, seed: int) -> RegressionDataset:
    traj = _simulate_for(state, which, problem, rows, seed)
    if which == BACKWARD:
        return backward_targets(traj, state.forward)
    return forward_targets(traj, state.backward)


def _ridge_loss(model, ds: RegressionDataset) -> float:
    tot = 0.0
    for k in ds.ks:
        x, y, t = ds.block(int(k))
        r = model.mean(int(k), x, y) - t
        tot += float((r * r).sum(1).mean())
    return tot / len(ds.ks)


def fit_ridge_model(ds: RegressionDataset, schedule: Schedule, config: BridgeConfig, seed: int,
                    iteration: int | None = None):
    steps = {}
    for k in ds.ks:
        k = int(k)
        x, y, t = ds.block(k)
        try:
            steps[k] = approx.fit_ridge_step(
                x, y, t, k, ds.direction, schedule, n_rbf=config.n_rbf,
                seed=child_seed(seed, "features", k), parameterization=config.parameterization,
                lam=config.ridge_lambda, bandwidth_rule=config.bandwidth_rule,
                bandwidth_scale=config.bandwidth_scale, include_linear=config.include_linear,
                features=config.features)
        except FitError as exc:
            raise FitError(str(exc), iteration=iteration, k=k) from exc
    return approx.RidgeDriftModel(ds.direction, schedule, steps, config.parameterization)


def _input_moments(ds: RegressionDataset):
    _, x, y, _ = ds.rows()
    xy = np.concatenate([x, y], axis=1)
    sd = xy.std(0)
    return xy.mean(0), np.where(sd > 0, sd, 1.0)


def _mlp_batch(ds: RegressionDataset, schedule: Schedule, rng, batch: int, width: int,
               shift=None, scale=None):
    n_k, m, d = ds.x_in.shape
    ki = rng.integers(n_k, size=batch)
    ri = rng.integers(m, size=batch)
    ks = ds.ks[ki]
    x = ds.x_in[ki, ri]
    y = ds.y[ri]
    t = ds.targets[ki, ri]
    off = 1 if ds.direction == FORWARD else 0
    g = schedule.gammas[ks + off - 1][:, None]
    if schedule.scale is not None:
        g = g * schedule.scale[None, :]
    return approx.mlp_inputs(ks, x, y, width, shift, scale), (t - x) / g


def fit_mlp_model(state: IpfState, which: str, problem: JointProblem, seed: int,
                  ds: RegressionDataset | None = None, losses: list | None = None):
    spec = state.config.mlp
    prev = state.backward if which == BACKWARD else state.forward
    d = state.ref.d
    y_dim = problem.d_y
    if state.config.warm_start and isinstance(prev, approx.MlpDriftModel):
        params = [p.copy() for p in prev.params]
    else:
        sizes = [d + y_dim + spec.time_embedding, *spec.hidden, d]
        params = approx.init_mlp(sizes, child_seed(seed, "init"))
    refresh = 0
    if state.config.warm_start and isinstance(prev, approx.MlpDriftModel) and prev.shift is not None:
        shift, scale = prev.shift, prev.scale
    else:
        if ds is None:
            ds = build_dataset(state, which, problem, state.config.rows_per_fit,
                               child_seed(seed, "refresh", refresh))
            refresh += 1
        shift, scale = _input_moments(ds)
    opt = approx.AdamState.zeros_like(params)
    rng = stream(seed, "minibatch")
    ema = [p.copy() for p in params] if spec.ema_rate else None
    for it in range(spec.iterations):
        if ds is None or (spec.refresh_every and it > 0 and it % spec.refresh_every == 0):
            ds = build_dataset(state, which, problem, state.config.rows_per_fit,
                               child_seed(seed, "refresh", refresh))
            refresh += 1
        inputs, targets = _mlp_batch(ds, state.schedule, rng, spec.batch_size, spec.time_embedding,
                                     shift, scale)
        loss, grads = approx.mlp_grad(params, inputs, targets)
        params, opt = approx.adam_step(params, grads, opt, spec.learning_rate,
                                       spec.beta1, spec.beta2, spec.eps)
        if ema is not None:
            ema = [spec.ema_rate * e + (1 - spec.ema_rate) * p for e, p in zip(ema, params)]
        if losses is not None:
            losses.append(loss)
    final = ema if ema is not None else params
    return approx.MlpDriftModel(which, state.schedule, final, spec, state.config.parameterization,
                                shift, scale)


def fit_half_bridge(state: IpfState, which: str, problem: JointProblem, seed: int,
                    dataset: RegressionDataset | None = None) -> tuple[IpfState, Diagnostics]:
    """Fit the backward (``which="backward"``) or forward half-bridge."""
    t0 = time.perf_counter()
    if which == FORWARD and state.backward is None:
        raise StateError("a forward fit needs a fitted backward model")
    fit_seed = child_seed(seed, "fit", state.iteration, which)
    cfg = state.config
    if cfg.approximator == RIDGE:
        ds = dataset or build_dataset(state, which, problem, cfg.rows_per_fit, child_seed(fit_seed, "data"))
        model = fit_ridge_model(ds, state.schedule, cfg, fit_seed, state.iteration)
        loss = _ridge_loss(model, ds)
    else:
        losses: list = []
        model = fit_mlp_model(state, which, problem, fit_seed, dataset, losses)
        tail = losses[-min(len(losses), 1000):]
        loss = float(np.mean(tail)) if tail else float("nan")
    if which == BACKWARD:
        new = replace(state, backward=model, forward_prev=state.forward)
    else:
        new = replace(state, forward=model, iteration=state.iteration + 1)
    diag = Diagnostics(state.iteration + 1, which, loss, time.perf_counter() - t0)
    new = replace(new, history=state.history + (diag,))
    log.debug("iteration %d %s loss %.4g (%.2fs)", diag.iteration, which, loss, diag.wall_time)
    return new, diag


def run_cdsb(problem: JointProblem, schedule: Schedule, ref: RefMeasure, config: BridgeConfig,
             seed: int, initial_drift=None, callback: Callable | None = None,
             state: IpfState | None = None) -> IpfState:
    """Alternate backward and forward fits ``config.iterations`` times.

    ``callback(state, diagnostics)`` runs after every half-bridge fit.
    When ``fit_final_forward`` is false the last forward fit is skipped.
    """
    state = state or init_state(schedule, ref, config, initial_drift)
    for n in range(config.iterations):
        state, diag = fit_half_bridge(state, BACKWARD, problem, seed)
        if callback:
            callback(state, diag)
        if n == config.iterations - 1 and not config.fit_final_forward:
            break
        state, diag = fit_half_bridge(state, FORWARD, problem, seed)
        if callback:
            callback(state, diag)
    return state


def fit_csgm(problem: JointProblem, schedule: Schedule, ref: RefMeasure, config: BridgeConfig,
             seed: int, initial_drift=None) -> IpfState:
    """The conditional score-based baseline: a single backward fit."""
    state = init_state(schedule, ref, config, initial_drift)
    state, _ = fit_half_bridge(state, BACKWARD, problem, seed)
    return state


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


def _y_rows(y_obs, count: int) -> np.ndarray:
    """Conditions as (count, d_y) rows; a single vector is repeated."""
    if y_obs is None or np.size(y_obs) == 0:
        return np.zeros((count, 0))
    y = np.atleast_2d(np.asarray(y_obs, dtype=float))
    if y.shape[0] == 1 and count != 1:
        return np.broadcast_to(y, (count, y.shape[1])).copy()
    if y.shape[0] != count:
        raise InvalidArgument(f"got {y.shape[0]} condition rows for {count} samples")
    return y


def sample_posterior(state: IpfState, y_obs, count: int, seed: int) -> np.ndarray:
    """Ancestral sampling: X_N from the reference, then the backward chain with y fixed."""
    if state.backward is None:
        raise StateError("the backward model has not been fitted")
    y = _y_rows(y_obs, count)
    xn = state.ref.sample(y if state.ref.conditional else None, count, child_seed(seed, "ref"))
    return run_to_end(xn, y, state.backward, state.schedule, child_seed(seed, "noise"), BACKWARD)


def sample_posterior_fb(state: IpfState, problem: JointProblem, y_obs, count: int, seed: int) -> np.ndarray:
    """Forward-backward sampling.

    Joint draws (X, Y) are pushed to time N by the forward process the final
    backward model was trained to reverse, conditioned on their own Y; the
    backward chain then returns them to time 0 conditioned on ``y_obs``.
    """
    if state.backward is None or state.forward_prev is None:
        raise StateError("forward-backward sampling needs both half-bridges")
    x0, y = problem.sample_joint(count, child_seed(seed, "joint"))
    xn = run_to_end(x0, y, state.forward_prev, state.schedule, child_seed(seed, "fwd"), FORWARD)
    yo = _y_rows(y_obs, count)
    return run_to_end(xn, yo, state.backward, state.schedule, child_seed(seed, "bwd"), BACKWARD)


def sample_coupling(state: IpfState, y_obs, count: int, seed: int):
    """Endpoint pairs ``(X_0, X_N)`` of the backward bridge at fixed y."""
    y = _y_rows(y_obs, count)
    xn = state.ref.sample(y if state.ref.conditional else None, count, child_seed(seed, "ref"))
    x0 = run_to_end(xn, y, state.backward, state.schedule, child_seed(seed, "noise"), BACKWARD)
    return x0, xn


# ---------------------------------------------------------------------------
# Scores and evidence
# ---------------------------------------------------------------------------


def extract_score(state: IpfState, k: int, x, y) -> np.ndarray:
    """Estimate of the marginal score at time k: the average of the two drifts."""
    if not state.both_fitted:
        raise StateError("both half-bridges must be fitted")
    n = state.schedule.n_steps
    if not 1 <= k <= n - 1:
        raise InvalidArgument(f"k must lie in 1..{n - 1}, got {k}")
    x = np.atleast_2d(np.asarray(x, dtype=float))
    d = x.shape[1]
    y = _y_rows(y, x.shape[0])
    b = (state.backward.mean(k, x, y) - x) / state.schedule.step(k, d)
    f = (state.forward.mean(k, x, y) - x) / state.schedule.step(k + 1, d)
    return 0.5 * (b + f)


def _jacobian(model, k, x, y, d):
    if hasattr(model, "jacobian"):
        return model.jacobian(k, x, y)
    if isinstance(model, InitialDrift) and model.is_affine():
        # x + g * f0(x): f0 = -x (OU), 0 (Brownian), (mu - x)/var (Gaussian Langevin)
        g = np.broadcast_to(model.schedule.step(k + 1, d), (d,))
        if model.kind == "ornstein-uhlenbeck":
            slope = -np.ones(d)
        elif model.kind == "brownian":
            slope = np.zeros(d)
        else:
            slope = -1.0 / model.ref.variance
        return np.broadcast_to(np.diag(1.0 + g * slope), (x.shape[0], d, d))
    raise UnsupportedProblem("log-density flow needs drifts with analytic Jacobians")


def _tweedie_score(state: IpfState, j: int, z, y, d):
    """Score of the time-j marginal and its Jacobian from the pair (F, B).

    B was fitted against ``forward_prev``; for a Gaussian transition
    ``E[F(X_{j-1}) | X_j = z] = z + 2 gamma_j s(z)`` and the mean-matching
    regression gives ``B(j, z) = z - F(j-1, z) + E[F(X_{j-1}) | X_j = z]``.
    """
    fwd = state.forward_prev
    step = np.broadcast_to(state.schedule.step(j, d), (d,))
    s = (state.backward.mean(j, z, y) + fwd.mean(j - 1, z, y) - 2.0 * z) / (2.0 * step)
    jac = (_jacobian(state.backward, j, z, y, d) + _jacobian(fwd, j - 1, z, y, d)
           - 2.0 * np.eye(d)[None]) / (2.0 * step)[None, :, None]
    return s, jac


def flow_log_density(state: IpfState, x_eval, y=None) -> np.ndarray:
    """log p_0(x | y) by pushing x through a deterministic flow to time N.

    Each chain step is mirrored by the map ``x -> u = F(k, x)`` followed by a
    Heun step of the heat flow ``dz/dt = -D s_t(z)`` over the step size, whose
    end-point scores come from :func:`_tweedie_score`.  The log-determinant of
    every step's Jacobian is accumulated and the terminal density is taken to
    be the reference.  F is the forward map the backward model was fitted
    against, so a CSGM state uses the exact initial drift.
    """
    if state.backward is None or state.forward_prev is None:
        raise StateError("the backward model has not been fitted")
    fwd = state.forward_prev
    x = np.atleast_2d(np.asarray(x_eval, dtype=float)).copy()
    m, d = x.shape
    yy = _y_rows(y, m)
    eye = np.eye(d)[None]
    total = np.zeros(m)
    for k in range(state.schedule.n_steps):
        g = np.broadcast_to(state.schedule.step(k + 1, d), (d,))
        u = fwd.mean(k, x, yy)
        ju = _jacobian(fwd, k, x, yy, d)
        if k == 0:
            s1, g1 = _tweedie_score(state, 1, u, yy, d)
            x_new = u - g * s1
            jac = (eye - g[None, :, None] * g1) @ ju
        else:
            sk, gk = _tweedie_score(state, k, x, yy, d)
            inv_t = np.swapaxes(np.linalg.inv(ju), 1, 2)
            s0 = np.einsum("mij,mj->mi", inv_t, sk)
            ds0 = inv_t @ gk
            xt = u - g * s0
            jt = ju - g[None, :, None] * ds0
            s1, g1 = _tweedie_score(state, k + 1, xt, yy, d)
            x_new = u - 0.5 * g * (s0 + s1)
            jac = ju - 0.5 * g[None, :, None] * (ds0 + g1 @ jt)
        sign, logdet = np.linalg.slogdet(jac)
        if np.any(sign <= 0):
            raise FitError(f"flow map is not orientation preserving at k={k}")
        total += logdet
        x = x_new
    return total + state.ref.log_density(x, yy if state.ref.conditional else None)


def estimate_log_evidence(state: IpfState, unconditional: IpfState, problem: JointProblem,
                          y_obs, x_eval) -> float:
    """``log p(y) = log g(y | x) + log p(x) - log p(x | y)`` at any x."""
    if not problem.has_likelihood:
        raise UnsupportedProblem(f"{problem.name} has no pointwise likelihood")
    x = np.atleast_2d(np.asarray(x_eval, dtype=float))
    y = np.asarray(y_obs, dtype=float).reshape(1, -1)
    log_g = problem.log_likelihood(y, x)
    log_px = flow_log_density(unconditional, x, None)
    log_pxy = flow_log_density(state, x, y)
    return float(np.mean(log_g + log_px - log_pxy))
