"""Command line entry point: ``cdsb {sim2d,bod,filter,oracle}``.

Every run writes ``metrics.csv``, ``samples.jsonl``, ``summary.json`` and
``resolved-config.json`` to the output directory (``oracle`` writes
``oracle.json`` instead of samples); ``--check`` adds ``checks.json``.  Exit codes: 0 success, 2 configuration
error, 3 numerical failure, 4 a ``--check`` acceptance failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import evaluate, experiments
from .config import COMMANDS, PROFILES, ExperimentConfig, load_json, resolve_config
from .errors import CDSBError, ConfigError, MissingOracle

log = logging.getLogger("cdsb")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_CHECK = 4


# ---------------------------------------------------------------------------
# Output helpers
# ---------------------------------------------------------------------------


def _num(v) -> str:
    """Shortest round-trip text for a number; deterministic across runs."""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return "" if v is None else str(v)


def write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_num(v) for v in row])


def write_jsonl(path: Path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps([float(v) for v in rec]) + "\n")


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if np.isfinite(f) else str(f)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _checks_json(checks) -> list:
    return [c.as_dict() for c in checks]


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_sim2d(cfg: ExperimentConfig, out: Path, check: bool) -> list:
    rows, finals, checks = [], {}, []
    for seed in cfg.seeds:
        res = experiments.run_sim2d(cfg, seed, keep_states=check)
        rows.extend((seed, it, y, w) for it, y, w in res.rows)
        finals[seed] = {"final_w1": res.final_w1(), "wall_time": res.wall_time}
        if seed == cfg.seeds[0]:
            write_jsonl(out / "samples.jsonl",
                        ([y, x] for y in sorted(res.samples) for x in res.samples[y]))
        if check:
            if cfg.method != "cdsb":
                raise ConfigError("method: --check for sim2d compares CSGM, CDSB and CDSB-FB "
                                  "and needs method 'cdsb'")
            checks += evaluate.check_sim2d(res, evaluate.sim2d_comparison(res, seed))
    # the fixed row schema is iteration,y_obs,w1; several seeds are concatenated in seed order
    write_csv(out / "metrics.csv", ["iteration", "y_obs", "w1"], [r[1:] for r in rows])
    write_json(out / "summary.json", {"problem": cfg.problem, "method": cfg.method, "seeds": finals,
                                      "samples_records": "[y_obs, x] for the first seed, final iteration",
                                      "checks": _checks_json(checks)})
    return checks


STAT_NAMES = ("mean", "var", "skew", "kurt")


def _moment_rows(label, stats):
    arr = stats.stacked()
    return [(label, s, f"x{j + 1}", arr[i, j]) for i, s in enumerate(STAT_NAMES) for j in range(2)]


def cmd_bod(cfg: ExperimentConfig, out: Path, check: bool) -> list:
    rows, summary, checks = [], {}, []
    for seed in cfg.seeds:
        res = experiments.run_bod(cfg, seed)
        for it, stats in res.per_iteration:
            rows += [(seed, *r) for r in _moment_rows(str(it), stats)]
        rows += [(seed, *r) for r in _moment_rows(f"avg-last-{cfg.bod.average_last}", res.average)]
        rows += [(seed, *r) for r in _moment_rows("quadrature", res.reference)]
        summary[seed] = {
            "average": res.average.as_dict(), "quadrature": res.reference.as_dict(),
            "rmse_by_iteration": {it: evaluate.bod_rmse(s, res.reference) for it, s in res.per_iteration},
            "y_obs": res.y_obs, "wall_time": res.wall_time}
        if seed == cfg.seeds[0]:
            write_jsonl(out / "samples.jsonl", res.samples)
        if check:
            checks += evaluate.check_bod(res)
    write_csv(out / "metrics.csv", ["seed", "iteration", "stat", "dim", "value"], rows)
    write_json(out / "summary.json", {"method": cfg.method, "seeds": summary,
                                      "samples_records": "[x1, x2] for the first seed, final iteration",
                                      "checks": _checks_json(checks)})
    return checks


def cmd_filter(cfg: ExperimentConfig, out: Path, check: bool) -> list:
    def progress(seed, label, rep):
        log.info("filter seed %d %s: rmse %.4g%s", seed, label, rep.rmse_oracle,
                 " (diverged)" if rep.diverged else "")

    results = experiments.run_filter_experiment(cfg, progress)
    rows, samples = [], []
    methods = list(cfg.filter.methods)
    for res in results:
        for label, rep in res.reports.items():
            for t, r in enumerate(rep.step_rmse):
                rows.append((res.seed, t, label, "step_rmse_truth", r))
            for key, value in rep.metrics().items():
                rows.append((res.seed, "all", label, key, value))
            for t, m in enumerate(rep.means):
                samples.append([res.seed, methods.index(label), t, *m])
    write_csv(out / "metrics.csv", ["run_seed", "t", "method", "metric", "value"], rows)
    write_jsonl(out / "samples.jsonl", samples)
    checks = evaluate.check_filter(results) if check else []
    write_json(out / "summary.json", {
        "methods": experiments.filter_summary(results),
        "method_order": methods,
        "samples_records": "[seed, method index, t, filtering mean...]",
        "wall_times": {r.seed: r.wall_times for r in results},
        "checks": _checks_json(checks)})
    return checks


def cmd_oracle(cfg: ExperimentConfig, out: Path, check: bool) -> list:
    cache_dir = None
    if cfg.oracle.cache:
        cache_dir = Path(cfg.oracle.cache_dir) if cfg.oracle.cache_dir else out / "oracle-cache"
    cache = experiments.OracleCache(cache_dir, cfg.oracle.compute_missing)
    seed = cfg.seeds[0]
    res = experiments.run_oracle(cfg, seed, cache)
    checks = (evaluate.check_sinkhorn(res["sinkhorn"]) + evaluate.check_gaussian_bridge(res["gaussian_bridge"])
              + evaluate.check_static_bridge(res["gaussian_bridge"]) + evaluate.check_evidence(res["evidence"]))
    rows = [(c.criterion, c.name, c.observed, c.relation, c.threshold if not isinstance(c.threshold, tuple)
             else list(c.threshold), c.passed) for c in checks]
    write_csv(out / "metrics.csv", ["criterion", "check", "observed", "relation", "threshold", "passed"], rows)
    write_json(out / "oracle.json", {"seed": seed, "results": res, "cache": cache.events})
    write_json(out / "summary.json", {"checks": _checks_json(checks), "cache": cache.events})
    return checks


COMMAND_FUNCS = {"sim2d": cmd_sim2d, "bod": cmd_bod, "filter": cmd_filter, "oracle": cmd_oracle}


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cdsb", description="Conditional diffusion Schrodinger bridges")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", type=str, default=None, help="JSON config merged over the profile defaults")
    p.add_argument("--seed", type=int, default=None, help="run a single seed (overrides 'seeds')")
    p.add_argument("--out", type=str, default=None, help="output directory (default: runs/<command>)")
    p.add_argument("--profile", choices=PROFILES, default="paper")
    p.add_argument("--threads", type=int, default=None, help="cap BLAS/OpenMP worker threads")
    p.add_argument("--check", action="store_true", help="judge the run against its acceptance criteria")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _limit_threads(n: int | None):
    if n is None:
        return None
    if n < 1:
        raise ConfigError("--threads must be at least 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        user = load_json(args.config) if args.config else {}
        overrides = {}
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("--seed must be non-negative")
            overrides["seeds"] = [args.seed]
        if args.out is not None:
            overrides["output"] = args.out
        cfg = resolve_config(args.command, args.profile, user, overrides)
        limiter = _limit_threads(args.threads)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    out = Path(cfg.output or f"runs/{cfg.command}")
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved-config.json").write_text(cfg.to_json(), encoding="utf-8")
    start = time.perf_counter()
    try:
        checks = COMMAND_FUNCS[cfg.command](cfg, out, args.check)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingOracle as exc:
        print(f"missing oracle: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (CDSBError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    finally:
        if limiter is not None:
            limiter.restore_original_limits()
    log.info("%s finished in %.1fs", cfg.command, time.perf_counter() - start)
    if args.check:
        evaluate.write_checks(checks, out / "checks.json")
        for c in checks:
            print(c.line())
        if not evaluate.all_passed(checks):
            return EXIT_CHECK
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
