"""Joint-sample generators with whatever analytic ground truth each admits."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import special, stats

from .errors import InvalidArgument, NumericalBlowup, UnsupportedProblem
from .rng import stream

GAMMA_SCALE = 0.3
EX2_VAR = 0.05
Y_RANGE = (-3.0, 3.0)


class JointProblem:
    """Base class: ``sample_joint(count, seed) -> (X, Y)`` with X (M, d), Y (M, d_y)."""

    name = "problem"
    d = 1
    d_y = 1

    def sample_joint(self, count: int, seed: int):
        raise NotImplementedError

    def sample_prior(self, count: int, seed: int) -> np.ndarray:
        return self.sample_joint(count, seed)[0]

    def log_likelihood(self, y, x) -> np.ndarray:
        raise UnsupportedProblem(f"{self.name} has no pointwise likelihood")

    @property
    def has_likelihood(self) -> bool:
        return type(self).log_likelihood is not JointProblem.log_likelihood

    def posterior(self, y):
        return None


# ---------------------------------------------------------------------------
# Two-dimensional examples
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Posterior1D:
    """Analytic 1-D posterior: density, cdf, quantile function and support."""

    pdf: Callable
    ppf: Callable
    cdf: Callable
    support: tuple
    point_mass: Optional[float] = None


def _expon_posterior(loc: float, scale: float, sign: float = 1.0) -> Posterior1D:
    if sign > 0:
        return Posterior1D(
            pdf=lambda x: np.where(np.asarray(x) >= loc, np.exp(-(np.asarray(x) - loc) / scale) / scale, 0.0),
            ppf=lambda u: loc - scale * np.log1p(-np.asarray(u)),
            cdf=lambda x: np.where(np.asarray(x) >= loc, -np.expm1(-(np.asarray(x) - loc) / scale), 0.0),
            support=(loc, np.inf),
        )
    return Posterior1D(
        pdf=lambda x: np.where(np.asarray(x) <= loc, np.exp((np.asarray(x) - loc) / scale) / scale, 0.0),
        ppf=lambda u: loc + scale * np.log(np.asarray(u)),
        cdf=lambda x: np.where(np.asarray(x) <= loc, np.exp((np.minimum(np.asarray(x), loc) - loc) / scale), 1.0),
        support=(-np.inf, loc),
    )


def _ex2_posterior(y: float) -> Posterior1D:
    s = np.sqrt(EX2_VAR)

    def pdf(x):
        x = np.asarray(x, dtype=float)
        inside = np.abs(x) < 1
        xs = np.where(inside, x, 0.0)
        val = stats.norm.pdf((np.arctanh(xs) - y) / s) / (s * (1.0 - xs**2))
        return np.where(inside, val, 0.0)

    def cdf(x):
        x = np.clip(np.asarray(x, dtype=float), -1.0, 1.0)
        with np.errstate(divide="ignore"):
            return stats.norm.cdf((np.arctanh(x) - y) / s)

    return Posterior1D(pdf, lambda u: np.tanh(y + s * stats.norm.ppf(u)), cdf, (-1.0, 1.0))


@dataclass(frozen=True)
class Example2D(JointProblem):
    example: int
    d: int = 1
    d_y: int = 1

    def __post_init__(self):
        if self.example not in (1, 2, 3):
            raise InvalidArgument(f"2-D example id must be 1, 2 or 3, got {self.example}")

    @property
    def name(self) -> str:
        return f"2d-{self.example}"

    def sample_joint(self, count: int, seed: int):
        rng = stream(seed, "joint", self.name)
        y = rng.uniform(*Y_RANGE, size=(count, 1))
        if self.example == 2:
            x = np.tanh(y + np.sqrt(EX2_VAR) * rng.standard_normal((count, 1)))
        else:
            z = rng.gamma(1.0, GAMMA_SCALE, size=(count, 1))
            x = np.tanh(y) + z if self.example == 1 else z * np.tanh(y)
        return x, y

    def posterior(self, y) -> Posterior1D:
        y = float(np.asarray(y).reshape(-1)[0])
        t = np.tanh(y)
        if self.example == 1:
            return _expon_posterior(t, GAMMA_SCALE)
        if self.example == 2:
            return _ex2_posterior(y)
        if t == 0.0:
            return Posterior1D(
                pdf=lambda x: np.zeros_like(np.asarray(x, dtype=float)),
                ppf=lambda u: np.zeros_like(np.asarray(u, dtype=float)),
                cdf=lambda x: (np.asarray(x) >= 0).astype(float),
                support=(0.0, 0.0),
                point_mass=0.0,
            )
        return _expon_posterior(0.0, GAMMA_SCALE * abs(t), np.sign(t))


def sample_2d_example(example: int, count: int, seed: int):
    prob = Example2D(example)
    x, y = prob.sample_joint(count, seed)
    return x, y, prob


# ---------------------------------------------------------------------------
# Biochemical oxygen demand
# ---------------------------------------------------------------------------

BOD_TIMES = np.arange(1, 6, dtype=float)
BOD_NOISE_VAR = 1e-3


def bod_mean(x) -> np.ndarray:
    """Noiseless BOD curve ``A (1 - exp(-B t))`` at t = 1..5, shape (M, 5)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    a = 0.8 + 0.4 * special.erf(x[:, :1] / np.sqrt(2.0))
    b = 0.16 + 0.15 * special.erf(x[:, 1:2] / np.sqrt(2.0))
    return a * (1.0 - np.exp(-b * BOD_TIMES[None, :]))


def canonical_bod_observation() -> np.ndarray:
    """The fixed evaluation observation: the curve at X = (0, 0) plus seed-0 noise."""
    noise = stream(0, "bod-y").standard_normal(5) * np.sqrt(BOD_NOISE_VAR)
    return bod_mean(np.zeros(2))[0] + noise


@dataclass(frozen=True)
class BOD(JointProblem):
    name: str = "bod"
    d: int = 2
    d_y: int = 5

    def sample_joint(self, count: int, seed: int):
        rng = stream(seed, "joint", self.name)
        x = rng.standard_normal((count, 2))
        y = bod_mean(x) + np.sqrt(BOD_NOISE_VAR) * rng.standard_normal((count, 5))
        return x, y

    def log_likelihood(self, y, x) -> np.ndarray:
        r = np.atleast_2d(y) - bod_mean(x)
        return -0.5 * (r * r).sum(1) / BOD_NOISE_VAR - 2.5 * np.log(2 * np.pi * BOD_NOISE_VAR)

    def log_prior(self, x) -> np.ndarray:
        x = np.atleast_2d(x)
        return -0.5 * (x * x).sum(1) - np.log(2 * np.pi)


def sample_bod(count: int, seed: int):
    prob = BOD()
    x, y = prob.sample_joint(count, seed)
    return x, y, prob


# ---------------------------------------------------------------------------
# Linear Gaussian
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GaussianPosterior:
    mean: np.ndarray
    var: np.ndarray

    def ppf(self, u):
        return self.mean[0] + np.sqrt(self.var[0]) * stats.norm.ppf(u)

    def pdf(self, x):
        return stats.norm.pdf(x, self.mean[0], np.sqrt(self.var[0]))

    def cdf(self, x):
        return stats.norm.cdf(x, self.mean[0], np.sqrt(self.var[0]))

    def logpdf(self, x):
        x = np.atleast_2d(x)
        r = x - self.mean
        return -0.5 * ((r * r) / self.var + np.log(2 * np.pi * self.var)).sum(1)


@dataclass(frozen=True)
class LinearGaussian(JointProblem):
    """X ~ N(0, prior_var I), Y = X + N(0, obs_var I)."""

    dims: int = 1
    prior_var: float = 1.0
    obs_var: float = 0.25
    name: str = "linear-gaussian"

    def __post_init__(self):
        if self.prior_var <= 0 or self.obs_var <= 0:
            raise InvalidArgument("variances must be positive")

    @property
    def d(self) -> int:
        return self.dims

    @property
    def d_y(self) -> int:
        return self.dims

    def sample_joint(self, count: int, seed: int):
        rng = stream(seed, "joint", self.name)
        x = np.sqrt(self.prior_var) * rng.standard_normal((count, self.dims))
        y = x + np.sqrt(self.obs_var) * rng.standard_normal((count, self.dims))
        return x, y

    def log_likelihood(self, y, x) -> np.ndarray:
        r = np.atleast_2d(y) - np.atleast_2d(x)
        return -0.5 * ((r * r) / self.obs_var + np.log(2 * np.pi * self.obs_var)).sum(1)

    def log_prior(self, x) -> np.ndarray:
        x = np.atleast_2d(x)
        return -0.5 * ((x * x) / self.prior_var + np.log(2 * np.pi * self.prior_var)).sum(1)

    def posterior(self, y) -> GaussianPosterior:
        y = np.asarray(y, dtype=float).reshape(-1)
        tot = self.prior_var + self.obs_var
        y = np.broadcast_to(y, (self.dims,))
        return GaussianPosterior(y * self.prior_var / tot,
                                 np.full(self.dims, self.prior_var * self.obs_var / tot))

    def log_evidence(self, y) -> float:
        y = np.broadcast_to(np.asarray(y, dtype=float).reshape(-1), (self.dims,))
        tot = self.prior_var + self.obs_var
        return float(-0.5 * ((y * y) / tot + np.log(2 * np.pi * tot)).sum())


def sample_linear_gaussian(dims: int, prior_var: float, obs_var: float, count: int, seed: int):
    prob = LinearGaussian(dims, prior_var, obs_var)
    x, y = prob.sample_joint(count, seed)
    return x, y, prob


@dataclass(frozen=True)
class Unconditional(JointProblem):
    """The same data distribution with the observation dropped (d_y = 0)."""

    base: JointProblem
    d_y: int = 0

    @property
    def name(self) -> str:
        return f"{self.base.name}/unconditional"

    @property
    def d(self) -> int:
        return self.base.d

    def sample_joint(self, count: int, seed: int):
        x, _ = self.base.sample_joint(count, seed)
        return x, np.zeros((count, 0))


def make_problem(problem_id: str, **kwargs) -> JointProblem:
    if problem_id.startswith("2d-"):
        return Example2D(int(problem_id[3:]))
    if problem_id == "bod":
        return BOD()
    if problem_id == "linear-gaussian":
        return LinearGaussian(**kwargs)
    raise InvalidArgument(f"unknown problem id {problem_id!r}")


# ---------------------------------------------------------------------------
# State-space models
# ---------------------------------------------------------------------------

L63_SIGMA = 10.0
L63_RHO = 28.0
L63_BETA = 8.0 / 3.0


def lorenz_field(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    a, b, c = x[..., 0], x[..., 1], x[..., 2]
    return np.stack(
        [L63_SIGMA * (b - a), a * (L63_RHO - c) - b, a * b - L63_BETA * c], axis=-1
    )


def lorenz_rk4(x, dt: float = 0.1, substep: float = 0.05) -> np.ndarray:
    """Classical RK4 integration of Lorenz-63 over ``dt`` in steps of ``substep``."""
    x = np.array(x, dtype=float)
    n_sub = int(round(dt / substep))
    if n_sub < 1 or abs(n_sub * substep - dt) > 1e-12:
        raise InvalidArgument("dt must be a positive multiple of substep")
    h = substep
    for _ in range(n_sub):
        k1 = lorenz_field(x)
        k2 = lorenz_field(x + 0.5 * h * k1)
        k3 = lorenz_field(x + 0.5 * h * k2)
        k4 = lorenz_field(x + h * k3)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(x)):
        raise NumericalBlowup("Lorenz-63 state escaped to non-finite values")
    return x


@dataclass(frozen=True)
class StateSpaceModel:
    """x_{t+1} = transition(x_t) + N(0, trans_var I); y_t = x_t + N(0, obs_var I)."""

    transition: Callable
    d: int
    trans_var: float
    obs_var: float
    init_var: float = 4.0
    name: str = "ssm"

    @property
    def d_y(self) -> int:
        return self.d

    def propagate(self, x, rng: np.random.Generator) -> np.ndarray:
        x = np.atleast_2d(x)
        return self.transition(x) + np.sqrt(self.trans_var) * rng.standard_normal(x.shape)

    def observe(self, x, rng: np.random.Generator) -> np.ndarray:
        x = np.atleast_2d(x)
        return x + np.sqrt(self.obs_var) * rng.standard_normal(x.shape)

    def obs_logpdf(self, y, x) -> np.ndarray:
        r = np.atleast_2d(x) - np.asarray(y, dtype=float).reshape(1, -1)
        return -0.5 * (r * r).sum(1) / self.obs_var - 0.5 * self.d * np.log(2 * np.pi * self.obs_var)


def lorenz63(trans_var: float = 1e-4, obs_var: float = 4.0, init_var: float = 4.0) -> StateSpaceModel:
    return StateSpaceModel(lorenz_rk4, 3, trans_var, obs_var, init_var, "lorenz63")


def linear_ssm(a: float = 0.9, trans_var: float = 0.5, obs_var: float = 1.0, d: int = 1,
               init_var: float = 1.0) -> StateSpaceModel:
    return StateSpaceModel(_Scale(a), d, trans_var, obs_var, init_var, "linear")


@dataclass(frozen=True)
class _Scale:
    a: float

    def __call__(self, x):
        return self.a * np.asarray(x, dtype=float)


def ssm_step(model: StateSpaceModel, x_t, seed: int):
    """One transition and observation; returns ``(x_{t+1}, y_{t+1})``."""
    rng = stream(seed, "ssm-step")
    x_next = model.propagate(x_t, rng)
    return x_next, model.observe(x_next, rng)


@dataclass(frozen=True)
class TwinData:
    """A true state path and its observations, shared by every filter in a run."""

    states: np.ndarray
    observations: np.ndarray
    init_mean: np.ndarray
    model: StateSpaceModel = field(repr=False)

    @property
    def horizon(self) -> int:
        return self.states.shape[0]


def generate_twin(model: StateSpaceModel, total_steps: int, filter_steps: int, seed: int,
                  x0=None) -> TwinData:
    """Run the true system for ``total_steps`` and keep the last ``filter_steps``.

    The filters start from ``N(init_mean, init_var I)`` where ``init_mean`` is
    the true state just before the filtering window perturbed by one draw of
    that same noise.
    """
    if filter_steps > total_steps:
        raise InvalidArgument("filter window longer than the simulated series")
    rng = stream(seed, "twin", model.name)
    x = np.ones((1, model.d)) if x0 is None else np.atleast_2d(np.asarray(x0, dtype=float))
    states, obs = [], []
    for _ in range(total_steps):
        x = model.propagate(x, rng)
        states.append(x[0])
        obs.append(model.observe(x, rng)[0])
    states = np.array(states)
    obs = np.array(obs)
    start = total_steps - filter_steps
    before = states[start - 1] if start > 0 else np.asarray(x0 if x0 is not None else np.ones(model.d), float)
    init_mean = before + np.sqrt(model.init_var) * rng.standard_normal(model.d)
    return TwinData(states[start:], obs[start:], init_mean, model)
