"""Function approximators for the per-step mean maps.

Two families share one contract (``mean(k, x, y)``):

* ridge regression on a bias + linear + Gaussian-RBF feature map, one
  regressor per time index;
* a small fully connected network with a sinusoidal time embedding,
  trained with hand-written backpropagation and Adam.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy import linalg

from .chain import FORWARD, Schedule
from .errors import FitError, IllConditioned, InvalidArgument
from .rng import stream

DIRECT = "direct"
RESIDUAL = "residual"
FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# Features
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FeatureConfig:
    d: int
    d_y: int
    include_bias: bool = True
    include_linear: bool = True
    rbf_centers: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    rbf_bandwidths: np.ndarray = field(default_factory=lambda: np.zeros(0))
    shift: Optional[np.ndarray] = None
    scale: Optional[np.ndarray] = None

    def __post_init__(self):
        c = np.asarray(self.rbf_centers, dtype=float)
        h = np.asarray(self.rbf_bandwidths, dtype=float).reshape(-1)
        if c.size == 0:
            c = np.zeros((0, self.d + self.d_y))
        if c.ndim != 2 or c.shape[1] != self.d + self.d_y:
            raise InvalidArgument(
                f"RBF centers must have {self.d + self.d_y} columns, got shape {c.shape}"
            )
        if h.size != c.shape[0]:
            raise InvalidArgument("one bandwidth per RBF center is required")
        if np.any(h <= 0):
            raise InvalidArgument("RBF bandwidths must be strictly positive")
        object.__setattr__(self, "rbf_centers", c)
        object.__setattr__(self, "rbf_bandwidths", h)
        p = self.d + self.d_y
        shift = np.zeros(p) if self.shift is None else np.asarray(self.shift, dtype=float)
        scale = np.ones(p) if self.scale is None else np.asarray(self.scale, dtype=float)
        if shift.shape != (p,) or scale.shape != (p,) or np.any(scale <= 0):
            raise InvalidArgument("standardization must have one positive scale per input")
        object.__setattr__(self, "shift", shift)
        object.__setattr__(self, "scale", scale)

    @property
    def n_rbf(self) -> int:
        return self.rbf_centers.shape[0]

    @property
    def n_features(self) -> int:
        return int(self.include_bias) + (self.d + self.d_y) * int(self.include_linear) + self.n_rbf

    def to_dict(self) -> dict:
        return {
            "d": self.d,
            "d_y": self.d_y,
            "include_bias": self.include_bias,
            "include_linear": self.include_linear,
            "rbf_centers": self.rbf_centers.tolist(),
            "rbf_bandwidths": self.rbf_bandwidths.tolist(),
            "shift": self.shift.tolist(),
            "scale": self.scale.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "FeatureConfig":
        return cls(
            d=data["d"],
            d_y=data["d_y"],
            include_bias=data["include_bias"],
            include_linear=data["include_linear"],
            rbf_centers=np.array(data["rbf_centers"], dtype=float).reshape(-1, data["d"] + data["d_y"]),
            rbf_bandwidths=np.array(data["rbf_bandwidths"], dtype=float),
            shift=np.array(data["shift"], dtype=float),
            scale=np.array(data["scale"], dtype=float),
        )


def _joint(x, y, cfg: FeatureConfig) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.asarray(y, dtype=float)
    if cfg.d_y == 0:
        y = np.zeros((x.shape[0], 0))
    else:
        y = np.atleast_2d(y)
        if y.shape[0] == 1 and x.shape[0] > 1:
            y = np.broadcast_to(y, (x.shape[0], y.shape[1]))
    if x.shape[1] != cfg.d or y.shape[1] != cfg.d_y:
        raise InvalidArgument(
            f"inputs have dimensions ({x.shape[1]}, {y.shape[1]}), features expect ({cfg.d}, {cfg.d_y})"
        )
    return (np.concatenate([x, y], axis=1) - cfg.shift) / cfg.scale


def _sqdist(z, c):
    d2 = (z * z).sum(1)[:, None] + (c * c).sum(1)[None, :] - 2.0 * z @ c.T
    return np.maximum(d2, 0.0)


def build_features(x, y, cfg: FeatureConfig) -> np.ndarray:
    """Feature rows ``[1, z, exp(-|z - c_i|^2 / (2 h_i^2))]`` with z the standardized (x, y).

    Accepts a single point or a batch; always returns a 2-D array.
    """
    z = _joint(x, y, cfg)
    cols = []
    if cfg.include_bias:
        cols.append(np.ones((z.shape[0], 1)))
    if cfg.include_linear:
        cols.append(z)
    if cfg.n_rbf:
        cols.append(np.exp(-_sqdist(z, cfg.rbf_centers) / (2.0 * cfg.rbf_bandwidths**2)))
    if not cols:
        return np.zeros((z.shape[0], 0))
    return np.concatenate(cols, axis=1)


def feature_jacobian(x, y, cfg: FeatureConfig) -> np.ndarray:
    """Derivative of every feature with respect to the state ``x``: shape (M, p, d)."""
    z = _joint(x, y, cfg)
    m, d = z.shape[0], cfg.d
    blocks = []
    if cfg.include_bias:
        blocks.append(np.zeros((m, 1, d)))
    if cfg.include_linear:
        lin = np.zeros((m, cfg.d + cfg.d_y, d))
        for j in range(d):
            lin[:, j, j] = 1.0 / cfg.scale[j]
        blocks.append(lin)
    if cfg.n_rbf:
        h2 = cfg.rbf_bandwidths**2
        phi = np.exp(-_sqdist(z, cfg.rbf_centers) / (2.0 * h2))
        diff = z[:, None, :d] - cfg.rbf_centers[None, :, :d]
        blocks.append(-phi[:, :, None] * diff / h2[None, :, None] / cfg.scale[None, None, :d])
    return np.concatenate(blocks, axis=1)


def kmeans(points: np.ndarray, n_centers: int, seed: int, iters: int = 20) -> np.ndarray:
    """Lloyd's algorithm with k-means++ seeding and a fixed iteration count."""
    rng = stream(seed, "kmeans")
    pts = np.asarray(points, dtype=float)
    n = pts.shape[0]
    if n_centers >= n:
        return pts[:n_centers].copy()
    centers = [pts[rng.integers(n)]]
    d2 = ((pts - centers[0]) ** 2).sum(1)
    for _ in range(1, n_centers):
        total = d2.sum()
        idx = rng.integers(n) if total <= 0 else rng.choice(n, p=d2 / total)
        centers.append(pts[idx])
        d2 = np.minimum(d2, ((pts - pts[idx]) ** 2).sum(1))
    c = np.array(centers)
    for _ in range(iters):
        lab = _sqdist(pts, c).argmin(1)
        for j in range(n_centers):
            sel = lab == j
            if sel.any():
                c[j] = pts[sel].mean(0)
    return c


def select_features(x, y, n_rbf: int, seed: int, include_bias: bool = True,
                    include_linear: bool = True, bandwidth_rule: str = "median",
                    bandwidth_scale: float = 1.0, subsample: int = 4000) -> FeatureConfig:
    """Standardize on the fit inputs and place RBF centers by seeded k-means.

    ``bandwidth_rule="median"`` uses the median pairwise distance among the
    centers; ``"nearest"`` uses the median nearest-neighbour distance, which
    suits many centers.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    d = x.shape[1]
    y = np.asarray(y, dtype=float).reshape(x.shape[0], -1)
    raw = np.concatenate([x, y], axis=1)
    shift = raw.mean(0)
    scale = raw.std(0)
    scale = np.where(scale > 1e-12, scale, 1.0)
    base = FeatureConfig(d, y.shape[1], include_bias, include_linear, shift=shift, scale=scale)
    if n_rbf <= 0:
        return base
    z = (raw - shift) / scale
    if z.shape[0] > subsample:
        idx = stream(seed, "subsample").choice(z.shape[0], subsample, replace=False)
        z = z[np.sort(idx)]
    centers = kmeans(z, n_rbf, seed)
    if n_rbf == 1:
        h = 1.0
    else:
        dist = np.sqrt(_sqdist(centers, centers))
        if bandwidth_rule == "median":
            h = float(np.median(dist[np.triu_indices(n_rbf, 1)]))
        elif bandwidth_rule == "nearest":
            np.fill_diagonal(dist, np.inf)
            h = float(np.median(dist.min(1)))
        else:
            raise InvalidArgument(f"unknown bandwidth rule {bandwidth_rule!r}")
        h = h if h > 1e-8 else 1.0
    return replace(base, rbf_centers=centers, rbf_bandwidths=np.full(n_rbf, h * bandwidth_scale))


# ---------------------------------------------------------------------------
# Ridge regression
# ---------------------------------------------------------------------------


def default_ridge_lambda(n_rows: int) -> float:
    return 1e-6 * n_rows


def _solve_normal(gram, rhs, lam, label):
    a = gram + lam * np.eye(gram.shape[0])
    try:
        factor = linalg.cho_factor(a, lower=True, check_finite=True)
    except linalg.LinAlgError as exc:
        raise IllConditioned(f"{label}: normal matrix is not positive definite (lambda={lam})") from exc
    diag = np.abs(np.diag(factor[0]))
    if diag.min() <= 1e-10 * diag.max():
        raise IllConditioned(f"{label}: normal matrix is numerically singular (lambda={lam})")
    return linalg.cho_solve(factor, rhs)


def ridge_fit(features, targets, lam: float = 0.0, label: str = "ridge") -> np.ndarray:
    """Solve ``(X^T X + lam I) W = X^T t`` by Cholesky factorization."""
    x = np.asarray(features, dtype=float)
    t = np.asarray(targets, dtype=float)
    if t.ndim == 1:
        t = t[:, None]
    if x.ndim != 2 or x.shape[0] < 1 or x.shape[0] != t.shape[0]:
        raise InvalidArgument(f"bad shapes for ridge fit: features {x.shape}, targets {t.shape}")
    if lam < 0:
        raise InvalidArgument("ridge penalty must be nonnegative")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(t))):
        raise InvalidArgument(f"{label}: non-finite entries in regression data")
    return _solve_normal(x.T @ x, x.T @ t, lam, label)


def ridge_fit_retry(features, targets, lam: float | None = None, retries: int = 8,
                    label: str = "ridge") -> tuple[np.ndarray, float]:
    """Ridge fit that doubles the penalty on ill-conditioning, at most ``retries`` times."""
    x = np.asarray(features, dtype=float)
    t = np.asarray(targets, dtype=float)
    if t.ndim == 1:
        t = t[:, None]
    lam = default_ridge_lambda(x.shape[0]) if lam is None else lam
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(t))):
        raise IllConditioned(f"{label}: non-finite entries in regression data")
    gram, rhs = x.T @ x, x.T @ t
    for _ in range(retries + 1):
        try:
            return _solve_normal(gram, rhs, lam, label), lam
        except IllConditioned:
            lam = 2.0 * lam if lam > 0 else default_ridge_lambda(x.shape[0])
    raise IllConditioned(f"{label}: still ill-conditioned after {retries} retries (lambda={lam})")


def ridge_objective(features, targets, weights, lam) -> float:
    r = features @ weights - targets
    return float((r * r).sum() + lam * (weights * weights).sum())


# ---------------------------------------------------------------------------
# Drift models
# ---------------------------------------------------------------------------


def _step_for(schedule: Schedule, direction: str, k: int, d: int):
    return schedule.step(k + 1 if direction == FORWARD else k, d)


def k_range(direction: str, n_steps: int) -> range:
    return range(0, n_steps) if direction == FORWARD else range(1, n_steps + 1)


@dataclass(frozen=True)
class RidgeStep:
    features: FeatureConfig
    weights: np.ndarray
    lam: float = 0.0


@dataclass(frozen=True)
class RidgeDriftModel:
    """One ridge regressor per time index.

    With the residual parameterization the regressor predicts
    ``(mean - x) / (gamma s)`` and the mean is ``x + gamma s * prediction``.
    """

    direction: str
    schedule: Schedule
    steps: dict
    parameterization: str = RESIDUAL

    def __post_init__(self):
        expected = set(k_range(self.direction, self.schedule.n_steps))
        if set(self.steps) != expected:
            raise InvalidArgument(f"{self.direction} model needs one regressor per k in {sorted(expected)}")

    def predict_inner(self, k: int, x, y) -> np.ndarray:
        step = self.steps[k]
        return build_features(x, y, step.features) @ step.weights

    def mean(self, k: int, x, y) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        out = self.predict_inner(k, x, y)
        if self.parameterization == RESIDUAL:
            return x + _step_for(self.schedule, self.direction, k, x.shape[1]) * out
        return out

    def jacobian(self, k: int, x, y) -> np.ndarray:
        """Jacobian of the mean map with respect to ``x``: shape (M, d, d)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        step = self.steps[k]
        jf = feature_jacobian(x, y, step.features)  # (M, p, d)
        jw = np.einsum("mpj,pi->mij", jf, step.weights)  # d out_i / d x_j
        if self.parameterization == RESIDUAL:
            g = np.broadcast_to(_step_for(self.schedule, self.direction, k, x.shape[1]), (x.shape[1],))
            return np.eye(x.shape[1])[None] + g[None, :, None] * jw
        return jw

    def to_json(self) -> str:
        return json.dumps({
            "format": "cdsb-drift",
            "version": FORMAT_VERSION,
            "family": "ridge",
            "direction": self.direction,
            "parameterization": self.parameterization,
            "schedule": self.schedule.to_dict(),
            "steps": {
                str(k): {"features": s.features.to_dict(), "weights": s.weights.tolist(), "lam": s.lam}
                for k, s in sorted(self.steps.items())
            },
        })


def zero_ridge_model(direction: str, schedule: Schedule, d: int, d_y: int) -> RidgeDriftModel:
    """Residual model with zero inner function, i.e. the identity map."""
    cfg = FeatureConfig(d, d_y, include_bias=True, include_linear=False)
    steps = {k: RidgeStep(cfg, np.zeros((1, d))) for k in k_range(direction, schedule.n_steps)}
    return RidgeDriftModel(direction, schedule, steps, RESIDUAL)


def fit_ridge_step(x_in, y, targets, k: int, direction: str, schedule: Schedule, *, n_rbf: int,
                   seed: int, parameterization: str = RESIDUAL, lam: float | None = None,
                   bandwidth_rule: str = "median", bandwidth_scale: float = 1.0,
                   include_bias: bool = True, include_linear: bool = True,
                   features: FeatureConfig | None = None) -> RidgeStep:
    """Fit one time index; ``features`` skips feature selection and reuses a fixed map."""
    x_in = np.asarray(x_in, dtype=float)
    cfg = features or select_features(x_in, y, n_rbf, seed, include_bias, include_linear,
                                       bandwidth_rule, bandwidth_scale)
    feats = build_features(x_in, y, cfg)
    if parameterization == RESIDUAL:
        g = _step_for(schedule, direction, k, x_in.shape[1])
        resp = (targets - x_in) / g
    else:
        resp = targets
    try:
        w, used = ridge_fit_retry(feats, resp, lam, label=f"{direction} k={k}")
    except IllConditioned as exc:
        raise FitError(str(exc), k=k) from exc
    return RidgeStep(cfg, w, used)


# ---------------------------------------------------------------------------
# Fully connected network
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MlpSpec:
    hidden: Sequence[int] = (128, 128)
    time_embedding: int = 16
    learning_rate: float = 1e-4
    batch_size: int = 100
    iterations: int = 30000
    refresh_every: int = 1000
    ema_rate: Optional[float] = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if len(self.hidden) < 1:
            raise InvalidArgument("an MLP needs at least one hidden layer")
        if self.learning_rate <= 0:
            raise InvalidArgument("learning rate must be positive")


def time_embedding(k, width: int) -> np.ndarray:
    """Sinusoidal positional encoding of integer time indices, shape (M, width)."""
    k = np.atleast_1d(np.asarray(k, dtype=float))[:, None]
    if width == 0:
        return np.zeros((k.shape[0], 0))
    half = width // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half, 1))
    ang = k * freqs[None, :]
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    if width % 2:
        emb = np.concatenate([emb, np.zeros((k.shape[0], 1))], axis=1)
    return emb


def silu(a):
    return a / (1.0 + np.exp(-a))


def silu_grad(a):
    s = 1.0 / (1.0 + np.exp(-a))
    return s * (1.0 + a * (1.0 - s))


def init_mlp(sizes: Sequence[int], seed: int) -> list:
    """Fan-in scaled uniform weights; the last layer starts at zero."""
    rng = stream(seed, "mlp-init")
    params = []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        if i == len(sizes) - 2:
            w = np.zeros((fan_in, fan_out))
        else:
            bound = 1.0 / np.sqrt(fan_in)
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        params.append(w)
        params.append(np.zeros(fan_out))
    return params


def mlp_inputs(k, x, y, width: int, shift=None, scale=None) -> np.ndarray:
    """Network input rows ``[(x, y) standardized, time embedding]``."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.asarray(y, dtype=float).reshape(x.shape[0], -1) if np.size(y) else np.zeros((x.shape[0], 0))
    kk = np.broadcast_to(np.asarray(k), (x.shape[0],))
    xy = np.concatenate([x, y], axis=1)
    if shift is not None:
        xy = (xy - shift) / scale
    return np.concatenate([xy, time_embedding(kk, width)], axis=1)


def _net(params, inputs, activation=True):
    """Return output and the per-layer caches needed for backpropagation."""
    h = inputs
    cache = []
    n_layers = len(params) // 2
    for i in range(n_layers):
        w, b = params[2 * i], params[2 * i + 1]
        a = h @ w
        a += b
        if activation and i < n_layers - 1:
            sig = 1.0 / (1.0 + np.exp(-a))
            cache.append((h, a, sig))
            h = a * sig
        else:
            cache.append((h, a, None))
            h = a
    return h, cache


def mlp_forward(params, k, x, y, *, parameterization: str = RESIDUAL, step=1.0,
                time_width: int = 0, activation: bool = True, shift=None, scale=None) -> np.ndarray:
    """Mean produced by the network: ``x + step * net`` (residual) or ``net`` (direct)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    out, _ = _net(params, mlp_inputs(k, x, y, time_width, shift, scale), activation)
    if parameterization == RESIDUAL:
        return x + step * out
    return out


def mlp_loss(params, inputs, targets, activation=True) -> float:
    out, _ = _net(params, inputs, activation)
    r = out - targets
    return float((r * r).sum(1).mean())


def mlp_grad(params, inputs, targets, activation: bool = True) -> tuple[float, list]:
    """Loss ``mean_rows |net(inputs) - targets|^2`` and its exact gradient."""
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    if inputs.shape[0] == 0:
        raise InvalidArgument("empty minibatch")
    out, cache = _net(params, inputs, activation)
    r = out - targets
    per_row = (r * r).sum(1)
    if not np.all(np.isfinite(per_row)):
        bad = int(np.flatnonzero(~np.isfinite(per_row))[0])
        raise FitError(f"non-finite loss at minibatch row {bad}")
    n = inputs.shape[0]
    delta = 2.0 * r / n
    grads = [None] * len(params)
    n_layers = len(params) // 2
    for i in reversed(range(n_layers)):
        h_in = cache[i][0]
        grads[2 * i] = h_in.T @ delta
        grads[2 * i + 1] = delta.sum(0)
        if i > 0:
            delta = delta @ params[2 * i].T
            if activation:
                _, a, sig = cache[i - 1]
                delta *= sig * (1.0 + a * (1.0 - sig))
    return float(per_row.mean()), grads


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


def adam_step(params, grads, state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> tuple[list, AdamState]:
    """One Adam update with bias correction; returns new parameters and state."""
    t = state.t + 1
    new_p, new_m, new_v = [], [], []
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    step = lr / c1
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v
        v += (1.0 - beta2) * (g * g)
        den = np.sqrt(v / c2)
        den += eps
        new_p.append(p - step * m / den)
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(new_m, new_v, t)


@dataclass(frozen=True)
class MlpDriftModel:
    """A single time-conditioned network shared by every step of one direction."""

    direction: str
    schedule: Schedule
    params: list
    spec: MlpSpec
    parameterization: str = RESIDUAL
    shift: Optional[np.ndarray] = None
    scale: Optional[np.ndarray] = None

    def mean(self, k: int, x, y) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        step = _step_for(self.schedule, self.direction, k, x.shape[1])
        return mlp_forward(self.params, k, x, y, parameterization=self.parameterization,
                           step=step, time_width=self.spec.time_embedding,
                           shift=self.shift, scale=self.scale)

    def to_json(self) -> str:
        return json.dumps({
            "format": "cdsb-drift",
            "version": FORMAT_VERSION,
            "family": "mlp",
            "direction": self.direction,
            "parameterization": self.parameterization,
            "schedule": self.schedule.to_dict(),
            "spec": {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.spec.__dict__.items()},
            "params": [p.tolist() for p in self.params],
            "shift": None if self.shift is None else self.shift.tolist(),
            "scale": None if self.scale is None else self.scale.tolist(),
        })


def drift_from_json(text: str):
    data = json.loads(text)
    if data.get("format") != "cdsb-drift" or data.get("version") != FORMAT_VERSION:
        raise InvalidArgument("not a serialized drift model of a supported version")
    sched = Schedule(np.array(data["schedule"]["gammas"]),
                     None if data["schedule"]["scale"] is None else np.array(data["schedule"]["scale"]))
    if data["family"] == "ridge":
        steps = {
            int(k): RidgeStep(FeatureConfig.from_dict(s["features"]),
                              np.array(s["weights"], dtype=float), s["lam"])
            for k, s in data["steps"].items()
        }
        return RidgeDriftModel(data["direction"], sched, steps, data["parameterization"])
    spec_d = dict(data["spec"])
    spec_d["hidden"] = tuple(spec_d["hidden"])
    params = [np.array(p, dtype=float) for p in data["params"]]
    norm = {k: (None if data.get(k) is None else np.array(data[k], dtype=float)) for k in ("shift", "scale")}
    return MlpDriftModel(data["direction"], sched, params, MlpSpec(**spec_d), data["parameterization"], **norm)
