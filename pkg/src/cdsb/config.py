"""Experiment configuration: strict JSON schema plus per-profile defaults.

A run's configuration is the profile defaults for its subcommand with the
user's JSON merged on top, validated as a whole.  Unknown keys anywhere are
rejected, and validation errors carry the dotted path of the offending field.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path
from typing import List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigError

COMMANDS = ("sim2d", "bod", "filter", "oracle")
PROFILES = ("paper", "fast")
BRIDGE_METHODS = ("csgm", "cdsb", "csgm-c", "cdsb-c", "cdsb-fb")
FILTER_METHODS = ("enkf", "csgm", "cdsb", "csgm-c", "cdsb-c", "cdsb-long", "cdsb-c-long")


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ScheduleSpec(_Strict):
    kind: Literal["linear", "constant"] = "linear"
    n_steps: int = Field(gt=0)
    gamma_min: float = Field(gt=0)
    gamma_max: float = Field(gt=0)
    # "ref-variance" multiplies every step by the reference variance per dimension
    scaling: Literal["none", "ref-variance"] = "none"


class ApproximatorSpec(_Strict):
    kind: Literal["ridge-rbf", "mlp"] = "ridge-rbf"
    n_rbf: int = Field(default=30, ge=0)
    include_linear: bool = True
    bandwidth_rule: Literal["median", "nearest"] = "median"
    bandwidth_scale: float = Field(default=1.0, gt=0)
    ridge_lambda: Optional[float] = Field(default=None, ge=0)
    parameterization: Literal["residual", "direct"] = "residual"
    hidden: List[int] = Field(default_factory=lambda: [128, 128], min_length=1)
    time_embedding: int = Field(default=16, ge=2)
    learning_rate: float = Field(default=1e-4, gt=0)
    batch_size: int = Field(default=100, gt=0)
    iterations: int = Field(default=30_000, gt=0)
    refresh_every: int = Field(default=1000, ge=0)
    ema_rate: Optional[float] = Field(default=None, gt=0, lt=1)


class RefSpec(_Strict):
    kind: Literal["iso-gaussian", "learned-mean"] = "iso-gaussian"
    mean: float = 0.0
    variance: float = Field(default=1.0, gt=0)
    n_rbf: int = Field(default=10, ge=0)
    inflation: float = Field(default=1.0, gt=0)


class BudgetSpec(_Strict):
    iterations: int = Field(default=10, gt=0)
    trajectories: int = Field(default=50_000, gt=1)
    samples: int = Field(default=30_000, gt=1)


class Sim2dSpec(_Strict):
    y_obs: List[float] = Field(default_factory=lambda: [-1.2, 0.0, 1.2], min_length=1)


class BodSpec(_Strict):
    average_last: int = Field(default=10, gt=0)
    quadrature_points: int = Field(default=401, ge=400)


class FilterSpec(_Strict):
    total_steps: int = Field(gt=0)
    filter_steps: int = Field(gt=0)
    particles: int = Field(default=500, gt=1)
    pf_particles: int = Field(default=100_000, gt=1)
    methods: List[str] = Field(default_factory=lambda: list(FILTER_METHODS[:3]) + ["cdsb-c", "cdsb-long"])
    # the short chain is the top-level schedule; "-long" methods use n_long steps and half gamma_max
    n_long: int = Field(default=100, gt=0)
    inflation: float = Field(default=1.0, gt=0)
    divergence_threshold: float = Field(default=5.0, gt=0)

    @model_validator(mode="after")
    def _check(self):
        if self.filter_steps > self.total_steps:
            raise ValueError("filter_steps exceeds total_steps")
        bad = [m for m in self.methods if m not in FILTER_METHODS]
        if bad:
            raise ValueError(f"unknown filter methods {bad}; choose from {list(FILTER_METHODS)}")
        return self


class OracleSpec(_Strict):
    cache: bool = True
    cache_dir: Optional[str] = None
    compute_missing: bool = True
    static_bridge_samples: int = Field(default=100_000, gt=1)
    evidence_x: List[float] = Field(default_factory=lambda: [0.5, 1.0], min_length=1)


class ExperimentConfig(_Strict):
    command: Literal["sim2d", "bod", "filter", "oracle"]
    profile: Literal["paper", "fast"] = "paper"
    problem: str
    method: Literal["csgm", "cdsb", "csgm-c", "cdsb-c", "cdsb-fb"] = "cdsb"
    schedule: ScheduleSpec
    approximator: ApproximatorSpec = Field(default_factory=ApproximatorSpec)
    ref: RefSpec = Field(default_factory=RefSpec)
    budgets: BudgetSpec = Field(default_factory=BudgetSpec)
    seeds: List[int] = Field(default_factory=lambda: [0], min_length=1)
    output: Optional[str] = None
    sim2d: Sim2dSpec = Field(default_factory=Sim2dSpec)
    bod: BodSpec = Field(default_factory=BodSpec)
    filter: Optional[FilterSpec] = None
    oracle: OracleSpec = Field(default_factory=OracleSpec)

    @model_validator(mode="after")
    def _check(self):
        allowed = {"sim2d": ("2d-1", "2d-2", "2d-3"), "bod": ("bod",),
                   "filter": ("lorenz63",), "oracle": ("linear-gaussian",)}[self.command]
        if self.problem not in allowed:
            raise ValueError(f"problem {self.problem!r} is not valid for {self.command}; "
                             f"choose from {list(allowed)}")
        if self.command == "filter" and self.filter is None:
            raise ValueError("the filter command needs a 'filter' section")
        if any(s < 0 for s in self.seeds):
            raise ValueError("seeds must be non-negative")
        return self

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# Profile defaults
# ---------------------------------------------------------------------------

_SIM2D = {
    "problem": "2d-1",
    "schedule": {"kind": "linear", "n_steps": 50, "gamma_min": 1e-4, "gamma_max": 5e-3},
    "approximator": {"kind": "ridge-rbf", "n_rbf": 30},
    "budgets": {"iterations": 10, "trajectories": 50_000, "samples": 30_000},
}

_BOD = {
    "problem": "bod",
    "schedule": {"kind": "constant", "n_steps": 50, "gamma_min": 0.01, "gamma_max": 0.01},
    "approximator": {"kind": "mlp", "hidden": [128, 128], "learning_rate": 1e-3,
                     "batch_size": 100, "iterations": 30_000, "refresh_every": 1000},
    "budgets": {"iterations": 20, "trajectories": 2000, "samples": 30_000},
}

_FILTER = {
    "problem": "lorenz63",
    "seeds": [0, 1, 2],
    "schedule": {"kind": "linear", "n_steps": 20, "gamma_min": 5e-4, "gamma_max": 0.05,
                 "scaling": "ref-variance"},
    "approximator": {"kind": "ridge-rbf", "n_rbf": 3},
    "budgets": {"iterations": 5, "trajectories": 500, "samples": 500},
    "filter": {"total_steps": 4000, "filter_steps": 2000},
}

_ORACLE = {
    "problem": "linear-gaussian",
    "schedule": {"kind": "linear", "n_steps": 20, "gamma_min": 0.005, "gamma_max": 0.011},
    "approximator": {"kind": "ridge-rbf", "n_rbf": 0},
    "ref": {"kind": "iso-gaussian", "mean": 0.0, "variance": 0.3},
    "budgets": {"iterations": 5, "trajectories": 100_000, "samples": 100_000},
}

_FAST = {
    "sim2d": {"budgets": {"iterations": 10, "trajectories": 20_000, "samples": 30_000}},
    "bod": {"approximator": {"iterations": 4000}, "budgets": {"iterations": 20}},
    "filter": {"filter": {"total_steps": 1000, "filter_steps": 500}},
    "oracle": {},
}


def deep_merge(base: dict, override: dict) -> dict:
    """Recursive dict merge; lists and scalars in ``override`` replace those in ``base``."""
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def profile_defaults(command: str, profile: str) -> dict:
    if command not in COMMANDS:
        raise ConfigError(f"unknown command {command!r}")
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}")
    base = {"sim2d": _SIM2D, "bod": _BOD, "filter": _FILTER, "oracle": _ORACLE}[command]
    out = deep_merge(base, {"command": command, "profile": profile})
    if profile == "fast":
        out = deep_merge(out, _FAST[command])
    return out


def format_validation_error(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        path = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"{path}: {err['msg']}")
    return "; ".join(lines)


def resolve_config(command: str, profile: str, user: dict | None = None,
                   overrides: dict | None = None) -> ExperimentConfig:
    """Defaults for ``(command, profile)``, then ``user``, then ``overrides``; validated.

    A user config naming a different command is an error.  A user config
    that names its own profile switches the defaults to that profile.
    """
    user = dict(user or {})
    if "command" in user and user["command"] != command:
        raise ConfigError(f"command: config is for {user['command']!r}, not {command!r}")
    profile = user.get("profile", profile) if isinstance(user.get("profile"), str) else profile
    if profile not in PROFILES:
        raise ConfigError(f"profile: unknown profile {profile!r}")
    merged = deep_merge(profile_defaults(command, profile), user)
    method = (overrides or {}).get("method", merged.get("method", "cdsb"))
    if command == "bod" and str(method).endswith("-c") and "schedule" not in user:
        # the conditional reference starts closer to the posterior, so the chain is shortened
        merged = deep_merge(merged, {"schedule": {"gamma_min": 0.005, "gamma_max": 0.005}})
    merged = deep_merge(merged, overrides or {})
    try:
        return ExperimentConfig.model_validate(merged)
    except ValidationError as exc:
        raise ConfigError(format_validation_error(exc)) from None


def load_json(path: str | Path) -> dict:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return data
