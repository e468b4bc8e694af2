"""Experiment runners shared by the command line and the acceptance suite.

Each runner takes a validated :class:`~cdsb.config.ExperimentConfig` and a
seed and returns plain result objects; writing files is left to the CLI and
judging results to :mod:`cdsb.evaluate`.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import stats

from . import bridge, filtering, oracle, problems, refmeasure
from .approx import MlpSpec
from .chain import LANGEVIN, OU, constant_schedule, linear_schedule
from .config import ExperimentConfig
from .errors import MissingOracle
from .rng import child_seed

log = logging.getLogger(__name__)

PACKAGE_VERSION = "0.1.0"


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------


def build_schedule(cfg: ExperimentConfig, scale=None):
    s = cfg.schedule
    scale = scale if s.scaling == "ref-variance" else None
    if s.kind == "constant":
        return constant_schedule(s.n_steps, s.gamma_min, scale=scale)
    return linear_schedule(s.n_steps, s.gamma_min, s.gamma_max, scale=scale)


def build_bridge_config(cfg: ExperimentConfig) -> bridge.BridgeConfig:
    a = cfg.approximator
    iterations = 1 if cfg.method in ("csgm", "csgm-c") else cfg.budgets.iterations
    mlp = MlpSpec(hidden=tuple(a.hidden), time_embedding=a.time_embedding,
                  learning_rate=a.learning_rate, batch_size=a.batch_size,
                  iterations=a.iterations, refresh_every=a.refresh_every, ema_rate=a.ema_rate)
    return bridge.BridgeConfig(
        iterations=iterations,
        approximator="mlp" if a.kind == "mlp" else "ridge",
        rows_per_fit=cfg.budgets.trajectories,
        n_rbf=a.n_rbf,
        include_linear=a.include_linear,
        bandwidth_rule=a.bandwidth_rule,
        bandwidth_scale=a.bandwidth_scale,
        ridge_lambda=a.ridge_lambda,
        parameterization=a.parameterization,
        mlp=mlp,
    )


def conditional_method(method: str) -> bool:
    return method.endswith("-c")


def build_ref(cfg: ExperimentConfig, problem, seed: int) -> refmeasure.RefMeasure:
    """The reference measure; the "-c" methods always use a mean regressed on y."""
    r = cfg.ref
    if conditional_method(cfg.method) or r.kind == "learned-mean":
        x, y = problem.sample_joint(cfg.budgets.trajectories, child_seed(seed, "ref-fit"))
        return refmeasure.learned_mean(x, y, n_rbf=r.n_rbf, seed=child_seed(seed, "ref-features"),
                                       inflation=r.inflation)
    return refmeasure.iso_gaussian(r.mean, r.variance * r.inflation, problem.d)


def default_drift(ref: refmeasure.RefMeasure) -> str:
    standard = (not ref.conditional and np.allclose(ref.mean_vec, 0.0)
                and np.allclose(ref.variance, 1.0))
    return OU if standard else LANGEVIN


def fit_bridge(cfg: ExperimentConfig, problem, seed: int, callback=None):
    """Fit the configured method on ``problem``; returns the final IPF state."""
    ref = build_ref(cfg, problem, seed)
    schedule = build_schedule(cfg, ref.variance)
    bcfg = build_bridge_config(cfg)
    return bridge.run_cdsb(problem, schedule, ref, bcfg, child_seed(seed, "fit"),
                           initial_drift=default_drift(ref), callback=callback)


# ---------------------------------------------------------------------------
# 2-D examples
# ---------------------------------------------------------------------------


@dataclass
class Sim2dResult:
    problem: str
    method: str
    seed: int
    rows: list                  # (iteration, y_obs, w1)
    samples: dict               # y_obs -> final-iteration samples
    states: dict = field(default_factory=dict, repr=False)   # iteration -> state (first and last)
    wall_time: float = 0.0

    def final_w1(self) -> dict:
        last = max(r[0] for r in self.rows) if self.rows else None
        return {y: w for it, y, w in self.rows if it == last}


def w1_excluded(problem_id: str, y: float) -> bool:
    """Example 3 at y = 0 has a point-mass posterior; W1 is not reported there."""
    return problem_id == "2d-3" and float(y) == 0.0


def sample_2d(state, problem, method: str, y: float, count: int, seed: int) -> np.ndarray:
    if method == "cdsb-fb":
        return bridge.sample_posterior_fb(state, problem, [y], count, seed)[:, 0]
    return bridge.sample_posterior(state, [y], count, seed)[:, 0]


def posterior_w1(problem, y: float, samples) -> float:
    return oracle.w1_distance_1d(samples, ppf=problem.posterior(y).ppf)


def run_sim2d(cfg: ExperimentConfig, seed: int, keep_states: bool = False) -> Sim2dResult:
    problem = problems.make_problem(cfg.problem)
    ys = [float(y) for y in cfg.sim2d.y_obs]
    rows, samples, states = [], {}, {}
    start = time.perf_counter()
    n_iter = build_bridge_config(cfg).iterations

    def on_fit(state, diag):
        if diag.direction != "backward":
            return
        it = diag.iteration
        for i, y in enumerate(ys):
            xs = sample_2d(state, problem, cfg.method, y, cfg.budgets.samples,
                           child_seed(seed, "eval", it, i))
            if it == n_iter:
                samples[y] = xs
            if not w1_excluded(cfg.problem, y):
                rows.append((it, y, posterior_w1(problem, y, xs)))
        if keep_states and it in (1, n_iter):
            states[it] = state
        log.info("sim2d %s iteration %d done", cfg.problem, it)

    fit_bridge(cfg, problem, seed, callback=on_fit)
    return Sim2dResult(cfg.problem, cfg.method, seed, rows, samples, states,
                       time.perf_counter() - start)


# ---------------------------------------------------------------------------
# BOD
# ---------------------------------------------------------------------------


@dataclass
class BodResult:
    seed: int
    y_obs: np.ndarray
    per_iteration: list          # (iteration, MomentStats)
    average: oracle.MomentStats
    reference: oracle.MomentStats
    samples: np.ndarray
    wall_time: float = 0.0


def average_moments(stats_list) -> oracle.MomentStats:
    arr = np.mean([s.stacked() for s in stats_list], axis=0)
    return oracle.MomentStats(*arr)


def run_bod(cfg: ExperimentConfig, seed: int) -> BodResult:
    problem = problems.BOD()
    y = problems.canonical_bod_observation()
    reference = oracle.bod_moments_quadrature(y, n=cfg.bod.quadrature_points)
    per_iteration = []
    final = {}
    start = time.perf_counter()

    def on_fit(state, diag):
        if diag.direction != "backward":
            return
        xs = bridge.sample_posterior(state, y, cfg.budgets.samples,
                                     child_seed(seed, "eval", diag.iteration))
        per_iteration.append((diag.iteration, oracle.moment_stats(xs)))
        final["samples"] = xs
        log.info("bod iteration %d done", diag.iteration)

    fit_bridge(cfg, problem, seed, callback=on_fit)
    tail = [m for _, m in per_iteration[-cfg.bod.average_last:]]
    return BodResult(seed, y, per_iteration, average_moments(tail), reference, final["samples"],
                     time.perf_counter() - start)


# ---------------------------------------------------------------------------
# Filtering
# ---------------------------------------------------------------------------


@dataclass
class FilterSeedResult:
    seed: int
    twin: problems.TwinData
    oracle: filtering.OracleMoments
    reports: dict                # method label -> FilterReport
    wall_times: dict


def assimilation_config(cfg: ExperimentConfig, long: bool) -> filtering.AssimilationConfig:
    f = cfg.filter
    return filtering.AssimilationConfig(
        long=long, n_short=cfg.schedule.n_steps, n_long=f.n_long,
        gamma_min=cfg.schedule.gamma_min, gamma_max=cfg.schedule.gamma_max,
        n_rbf=cfg.approximator.n_rbf, cdsb_iterations=cfg.budgets.iterations,
        inflation=f.inflation, ref_inflation=cfg.ref.inflation,
        scale_by_ref=cfg.schedule.scaling == "ref-variance")


def run_filter_seed(cfg: ExperimentConfig, seed: int, progress=None) -> FilterSeedResult:
    f = cfg.filter
    model = problems.lorenz63()
    twin = problems.generate_twin(model, f.total_steps, f.filter_steps, seed)
    orc = filtering.pf_oracle(model, twin.observations, twin.init_mean, f.pf_particles,
                              child_seed(seed, "pf"))
    reports, times = {}, {}
    for label in f.methods:
        long = label.endswith("-long")
        method = label[:-5] if long else label
        start = time.perf_counter()
        reports[label] = filtering.run_filter(
            twin, method, f.particles, orc, seed, assimilation_config(cfg, long),
            divergence_threshold=f.divergence_threshold)
        times[label] = time.perf_counter() - start
        if progress:
            progress(seed, label, reports[label])
    return FilterSeedResult(seed, twin, orc, reports, times)


def run_filter_experiment(cfg: ExperimentConfig, progress=None) -> list:
    return [run_filter_seed(cfg, s, progress) for s in cfg.seeds]


def filter_summary(results: list) -> dict:
    """Mean and std over seeds of each metric, per method; diverged runs are counted apart."""
    out = {}
    methods = list(results[0].reports) if results else []
    for m in methods:
        reps = [r.reports[m] for r in results]
        entry = {"runs": len(reps), "diverged_runs": int(sum(r.diverged for r in reps)),
                 "divergence_steps": [r.divergence_step for r in reps]}
        ok = [r for r in reps if not r.diverged]
        for key in ("rmse_oracle", "rmse_truth", "std_rmse"):
            vals = np.array([getattr(r, key) for r in ok])
            entry[key] = {"mean": float(vals.mean()) if vals.size else None,
                          "std": float(vals.std(ddof=1)) if vals.size > 1 else None}
        out[m] = entry
    return out


# ---------------------------------------------------------------------------
# Oracle computations with a content-hash cache
# ---------------------------------------------------------------------------


class OracleCache:
    """JSON results keyed by the sha256 of their inputs.

    ``compute_missing=False`` turns a miss into :class:`MissingOracle`.
    """

    def __init__(self, directory: str | Path | None, compute_missing: bool = True):
        self.directory = Path(directory) if directory else None
        self.compute_missing = compute_missing
        self.events = {}

    @staticmethod
    def key(name: str, inputs: dict) -> str:
        blob = json.dumps({"name": name, "inputs": inputs, "version": PACKAGE_VERSION},
                          sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def get(self, name: str, inputs: dict, compute) -> dict:
        key = self.key(name, inputs)
        path = self.directory / f"{name}-{key[:16]}.json" if self.directory else None
        if path is not None and path.exists():
            stored = json.loads(path.read_text(encoding="utf-8"))
            if stored.get("key") == key:
                log.info("oracle cache hit: %s (%s)", name, key[:16])
                self.events[name] = "hit"
                return stored["value"]
        if not self.compute_missing:
            where = f" --config <file with oracle.cache_dir={str(self.directory)!r}>" if self.directory else ""
            raise MissingOracle(f"oracle {name!r} is not cached and computation is disabled; "
                                f"populate the cache with `cdsb oracle{where}`")
        log.info("oracle cache miss: %s (%s); computing", name, key[:16])
        value = compute()
        self.events[name] = "miss"
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(json.dumps({"key": key, "name": name, "inputs": inputs, "value": value},
                                       sort_keys=True, indent=1), encoding="utf-8")
        return value


def sinkhorn_selftest(seed: int) -> dict:
    """2x2 brute force against the iterative solver, then marginal violation on a 100-point grid."""
    a = b = np.array([0.5, 0.5])
    cost = np.array([[0.0, 1.0], [1.0, 0.0]])
    it = oracle.sinkhorn(a, b, cost, 1.0, tol=1e-14)
    bf = oracle.brute_force_2x2(a, b, cost, 1.0)
    rng = np.random.default_rng(child_seed(seed, "sinkhorn-grid"))
    a = rng.random(100) + 0.1
    b = rng.random(100) + 0.1
    a, b = a / a.sum(), b / b.sum()
    grid = np.linspace(0.0, 1.0, 100)
    cp = oracle.sinkhorn(a, b, (grid[:, None] - grid[None, :]) ** 2, 0.01, tol=1e-9)
    return {"brute_force_error": float(np.abs(it.plan - bf).max()),
            "grid_violation": float(cp.violation), "grid_converged": bool(cp.converged)}


LG_Y = 1.0


def linear_gaussian_problem() -> problems.LinearGaussian:
    return problems.LinearGaussian(1, 1.0, 0.25)


def gaussian_bridge_check(cfg: ExperimentConfig, seed: int) -> dict:
    """Fit the conditional bridge on the 1-D linear-Gaussian problem and compare with the
    conjugate posterior; the same fit feeds the static bridge coupling check."""
    problem = linear_gaussian_problem()
    ref = refmeasure.iso_gaussian(cfg.ref.mean, cfg.ref.variance, 1)
    schedule = build_schedule(cfg, ref.variance)
    bcfg = replace(build_bridge_config(cfg), n_rbf=0, include_linear=True)
    state = bridge.run_cdsb(problem, schedule, ref, bcfg, child_seed(seed, "fit"),
                            initial_drift=LANGEVIN)
    n = cfg.oracle.static_bridge_samples
    xs = bridge.sample_posterior(state, [LG_Y], cfg.budgets.samples, child_seed(seed, "posterior"))
    x0, xn = bridge.sample_coupling(state, [LG_Y], n, child_seed(seed, "coupling"))
    post = problem.posterior([LG_Y])
    rep = oracle.static_bridge_check(post, cfg.ref.mean, cfg.ref.variance, state.initial_drift,
                                     schedule, x0, xn)
    return {"posterior_mean": float(xs.mean()), "posterior_var": float(xs.var()),
            "exact_mean": float(np.reshape(post.mean, -1)[0]),
            "exact_var": float(np.reshape(post.var, -1)[0]),
            "static_bridge_tv": float(rep.tv), "sinkhorn_converged": bool(rep.sinkhorn_converged),
            "off_grid_mass": float(rep.off_grid_mass)}


EVIDENCE_SCHEDULE = (200, 0.01, 0.03)
EVIDENCE_ROWS = 50_000


def evidence_check(x_eval, seed: int) -> dict:
    """Log-evidence of y = 1 from conditional and unconditional score models at each x."""
    problem = linear_gaussian_problem()
    unconditional = problems.Unconditional(problem)
    ref = refmeasure.iso_gaussian(0.0, 1.0, 1)
    schedule = linear_schedule(*EVIDENCE_SCHEDULE)
    bcfg = bridge.BridgeConfig(iterations=1, rows_per_fit=EVIDENCE_ROWS)
    cond = bridge.fit_csgm(problem, schedule, ref, bcfg, child_seed(seed, "evidence-cond"))
    unc = bridge.fit_csgm(unconditional, schedule, ref, bcfg, child_seed(seed, "evidence-unc"))
    exact = float(stats.norm.logpdf(LG_Y, 0.0, np.sqrt(1.25)))
    values = [float(bridge.estimate_log_evidence(cond, unc, problem, [LG_Y], [[x]])) for x in x_eval]
    return {"exact": exact, "x_eval": [float(x) for x in x_eval], "estimates": values,
            "errors": [v - exact for v in values], "spread": float(max(values) - min(values))}


def bod_quadrature(n: int) -> dict:
    ms = oracle.bod_moments_quadrature(problems.canonical_bod_observation(), n=n)
    return {k: [float(v) for v in np.reshape(val, -1)] for k, val in ms.as_dict().items()}


def run_oracle(cfg: ExperimentConfig, seed: int, cache: OracleCache) -> dict:
    inputs_bridge = {"schedule": cfg.schedule.model_dump(), "ref": cfg.ref.model_dump(),
                     "budgets": cfg.budgets.model_dump(), "approximator": cfg.approximator.model_dump(),
                     "samples": cfg.oracle.static_bridge_samples, "seed": seed}
    return {
        "sinkhorn": cache.get("sinkhorn", {"seed": seed}, lambda: sinkhorn_selftest(seed)),
        "gaussian_bridge": cache.get("gaussian-bridge", inputs_bridge,
                                     lambda: gaussian_bridge_check(cfg, seed)),
        "bod_quadrature": cache.get("bod-quadrature", {"n": cfg.bod.quadrature_points},
                                    lambda: bod_quadrature(cfg.bod.quadrature_points)),
        "evidence": cache.get("evidence", {"x_eval": list(cfg.oracle.evidence_x), "seed": seed,
                                           "schedule": EVIDENCE_SCHEDULE, "rows": EVIDENCE_ROWS},
                              lambda: evidence_check(cfg.oracle.evidence_x, seed)),
    }
