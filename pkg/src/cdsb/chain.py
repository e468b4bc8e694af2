"""Step-size schedules and simulation of Gaussian Markov chains.

Time indices run over ``0..N``.  A forward mean map is evaluated as
``F(k, x, y)`` for ``k`` in ``0..N-1`` and produces the mean of ``X_{k+1}``;
a backward mean map is evaluated as ``B(k, x, y)`` for ``k`` in ``1..N`` and
produces the mean of ``X_{k-1}``.  Both transitions use variance
``2 * gamma_k * scale`` where ``gamma_k`` is the step of the interval they
cross (``gamma_{k+1}`` for the forward move out of ``k``).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Protocol

import numpy as np

from .errors import ChainError, InvalidArgument
from .rng import stream

FORWARD = "forward"
BACKWARD = "backward"


@dataclass(frozen=True)
class Schedule:
    gammas: np.ndarray
    scale: Optional[np.ndarray] = None

    def __post_init__(self):
        g = np.asarray(self.gammas, dtype=float).reshape(-1)
        if g.size and not np.all(g > 0):
            raise InvalidArgument("all step sizes must be positive")
        g.setflags(write=False)
        object.__setattr__(self, "gammas", g)
        if self.scale is not None:
            s = np.asarray(self.scale, dtype=float).reshape(-1)
            if not np.all(s > 0):
                raise InvalidArgument("per-dimension scale entries must be positive")
            s.setflags(write=False)
            object.__setattr__(self, "scale", s)

    @property
    def n_steps(self) -> int:
        return int(self.gammas.size)

    def gamma(self, k: int) -> float:
        """Step size of the k-th interval, 1-based as in ``gamma_1..gamma_N``."""
        if not 1 <= k <= self.n_steps:
            raise InvalidArgument(f"step index {k} outside 1..{self.n_steps}")
        return float(self.gammas[k - 1])

    def step(self, k: int, d: int | None = None) -> np.ndarray | float:
        """Effective (possibly per-dimension) step ``gamma_k * scale``."""
        g = self.gamma(k)
        if self.scale is None:
            return g
        if d is not None and self.scale.size != d:
            raise InvalidArgument(f"scale has length {self.scale.size}, state dimension is {d}")
        return g * self.scale

    def with_scale(self, scale) -> "Schedule":
        return Schedule(self.gammas, scale)

    @property
    def total_time(self) -> float:
        return float(self.gammas.sum())

    def to_dict(self) -> dict:
        return {
            "gammas": self.gammas.tolist(),
            "scale": None if self.scale is None else self.scale.tolist(),
        }


def linear_schedule(n_steps: int, gamma_min: float, gamma_max: float, scale=None) -> Schedule:
    """``gamma_k = gamma_min + (k-1)/(N-1) * (gamma_max - gamma_min)`` for k = 1..N.

    Evaluated as a convex combination of the endpoints so that swapping them
    reverses the schedule exactly.  A decreasing schedule (``gamma_min >
    gamma_max``) is accepted.
    """
    if int(n_steps) != n_steps or n_steps < 1:
        raise InvalidArgument(f"n_steps must be a positive integer, got {n_steps}")
    if not (gamma_min > 0 and gamma_max > 0):
        raise InvalidArgument("step sizes must be positive")
    n_steps = int(n_steps)
    if n_steps == 1:
        return Schedule(np.array([gamma_min], dtype=float), scale)
    i = np.arange(n_steps)
    up = i / (n_steps - 1)
    down = (n_steps - 1 - i) / (n_steps - 1)
    return Schedule(down * gamma_min + up * gamma_max, scale)


def constant_schedule(n_steps: int, gamma: float, scale=None) -> Schedule:
    return linear_schedule(n_steps, gamma, gamma, scale)


def gaussian_step(x, mean, gamma, noise) -> np.ndarray:
    """One Gaussian transition: ``mean + sqrt(2 * gamma) * noise``.

    ``x`` is only used to check shapes; the caller computes ``mean`` from it.
    """
    x = np.asarray(x, dtype=float)
    mean = np.asarray(mean, dtype=float)
    noise = np.asarray(noise, dtype=float)
    if mean.shape != x.shape or noise.shape != x.shape:
        raise InvalidArgument(
            f"shape mismatch: x {x.shape}, mean {mean.shape}, noise {noise.shape}"
        )
    return mean + np.sqrt(2.0 * np.asarray(gamma, dtype=float)) * noise


class MeanMap(Protocol):
    def mean(self, k: int, x: np.ndarray, y: np.ndarray) -> np.ndarray: ...


OU = "ornstein-uhlenbeck"
BROWNIAN = "brownian"
LANGEVIN = "langevin-to-ref"


@dataclass(frozen=True)
class InitialDrift:
    """The reference forward dynamics ``F(k, x, y) = x + gamma_{k+1} s f0(x, y)``."""

    kind: str
    schedule: Schedule
    ref: object = None

    def __post_init__(self):
        if self.kind not in (OU, BROWNIAN, LANGEVIN):
            raise InvalidArgument(f"unknown initial drift kind {self.kind!r}")
        if self.kind == LANGEVIN and (self.ref is None or not hasattr(self.ref, "score")):
            raise InvalidArgument("langevin-to-ref drift needs a reference measure with a score")

    direction = FORWARD

    def inner(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        if self.kind == OU:
            return -x
        if self.kind == BROWNIAN:
            return np.zeros_like(x)
        return self.ref.score(x, y)

    def mean(self, k: int, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return x + self.schedule.step(k + 1, x.shape[-1]) * self.inner(x, y)

    def is_affine(self) -> bool:
        return self.kind in (OU, BROWNIAN) or getattr(self.ref, "is_gaussian", False)


@dataclass(frozen=True)
class Trajectory:
    states: np.ndarray
    conditions: np.ndarray
    direction: str
    schedule: Schedule = field(repr=False)

    def __post_init__(self):
        s = np.asarray(self.states)
        if s.ndim != 3 or s.shape[0] != self.schedule.n_steps + 1:
            raise InvalidArgument(
                f"states must have shape (N+1, M, d) with N={self.schedule.n_steps}, got {s.shape}"
            )
        if self.conditions.shape[0] != s.shape[1]:
            raise InvalidArgument("one condition row per path is required")
        s.setflags(write=False)
        self.conditions.setflags(write=False)

    @property
    def n_paths(self) -> int:
        return self.states.shape[1]


def _noise(seed: int, direction: str, k: int, shape) -> np.ndarray:
    return stream(seed, "chain", direction, k).standard_normal(shape)


def _check_output(out: np.ndarray, k: int, shape):
    if out.shape != shape:
        raise ChainError(k, -1, f"drift returned shape {out.shape}, expected {shape}")
    bad = ~np.all(np.isfinite(out), axis=1)
    if bad.any():
        raise ChainError(k, int(np.flatnonzero(bad)[0]), "non-finite drift output")


def _eval(drift, k, x, y):
    try:
        out = np.asarray(drift.mean(k, x, y), dtype=float)
    except ChainError:
        raise
    except Exception as exc:  # drift implementations may raise anything
        raise ChainError(k, -1, repr(exc)) from exc
    _check_output(out, k, x.shape)
    return out


def iterate_chain(init, conditions, drift, schedule: Schedule, seed: int, direction: str,
                  noise_fn: Callable | None = None):
    """Yield ``(k, X_k)`` along the chain, starting with the initial batch."""
    x = np.array(init, dtype=float, copy=True)
    if x.ndim != 2:
        raise InvalidArgument("init batch must be M x d")
    y = np.asarray(conditions, dtype=float)
    if y.ndim == 1:
        y = y.reshape(x.shape[0], -1)
    n, d = schedule.n_steps, x.shape[1]
    noise_fn = noise_fn or (lambda k: _noise(seed, direction, k, x.shape))
    if direction == FORWARD:
        yield 0, x
        for k in range(n):
            mean = _eval(drift, k, x, y)
            x = gaussian_step(x, mean, schedule.step(k + 1, d), noise_fn(k + 1))
            yield k + 1, x
    elif direction == BACKWARD:
        yield n, x
        for k in range(n, 0, -1):
            mean = _eval(drift, k, x, y)
            x = gaussian_step(x, mean, schedule.step(k, d), noise_fn(k))
            yield k - 1, x
    else:
        raise InvalidArgument(f"direction must be forward or backward, got {direction!r}")


def simulate_chain(init, conditions, drift, schedule: Schedule, seed: int,
                   direction: str = FORWARD) -> Trajectory:
    """Simulate M paths of the chain and return the full trajectory."""
    init = np.asarray(init, dtype=float)
    if init.ndim != 2:
        raise InvalidArgument("init batch must be M x d")
    cond = np.array(conditions, dtype=float, copy=True)
    if cond.ndim == 1:
        cond = cond.reshape(init.shape[0], -1)
    states = np.empty((schedule.n_steps + 1,) + init.shape)
    for k, x in iterate_chain(init, cond, drift, schedule, seed, direction):
        states[k] = x
    return Trajectory(states, cond, direction, schedule)


def run_to_end(init, conditions, drift, schedule: Schedule, seed: int, direction: str) -> np.ndarray:
    """Like :func:`simulate_chain` but keeps only the final slice."""
    x = None
    for _, x in iterate_chain(init, conditions, drift, schedule, seed, direction):
        pass
    return x


def ou_variance_recursion(schedule: Schedule, var0: float = 0.0) -> np.ndarray:
    """Marginal variances of the scalar OU chain ``x - gamma x + sqrt(2 gamma) z``."""
    out = [var0]
    for g in schedule.gammas:
        out.append((1.0 - g) ** 2 * out[-1] + 2.0 * g)
    return np.array(out)
