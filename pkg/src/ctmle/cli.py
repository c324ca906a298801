"""Command line interface: run, sweep, verify, complexity.

Exit codes: 0 success, 1 failed check, 2 configuration error, 3 runtime
failure.  All randomness derives from the config seed.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import os
import sys
import traceback
import warnings
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy.stats import spearmanr

from . import density, metrics
from .envs import PRESETS, make_environment
from .learner import LearnerConfig, kernel_for, run_experiment
from .sde_core import RngStream

SCHEMA_VERSION = 1

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


def fmt(x) -> str:
    """Decimal text with 17 significant digits for floats."""
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".17g")
    return str(x)


@dataclass
class ScheduleSpec:
    kind: str = "equidistant"
    delta: Optional[float] = 0.25
    times: Optional[list] = None
    ratio: Optional[float] = None
    m: Optional[int] = None


@dataclass
class EvaluationSpec:
    oracle_rollouts: int = 2560
    oracle_sim_step: Optional[float] = None
    eps: float = 0.005
    window: int = 20
    complexity_d: Optional[float] = None


@dataclass
class ExperimentConfig:
    environment: dict = field(default_factory=lambda: {"name": "ou_control", "sigma": 1.0, "overrides": {}})
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)
    learner: dict = field(default_factory=dict)
    evaluation: EvaluationSpec = field(default_factory=EvaluationSpec)
    seed: int = 0
    output_dir: str = "runs/default"
    sweep: Optional[dict] = None

    def to_dict(self) -> dict:
        d = {
            "schema_version": SCHEMA_VERSION,
            "environment": {"name": self.environment["name"], "sigma": self.environment["sigma"],
                            "overrides": dict(self.environment.get("overrides") or {})},
            "schedule": asdict(self.schedule),
            "learner": dict(self.learner),
            "evaluation": asdict(self.evaluation),
            "seed": self.seed,
            "output_dir": self.output_dir,
        }
        if self.sweep is not None:
            d["sweep"] = dict(self.sweep)
        return d

    def hash(self) -> str:
        d = self.to_dict()
        d.pop("output_dir")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]

    def learner_config(self, n_episodes=None, delta=None) -> LearnerConfig:
        s = self.schedule
        kw = dict(self.learner)
        if n_episodes is not None:
            kw["n_episodes"] = n_episodes
        return LearnerConfig(schedule_kind=s.kind, schedule_delta=s.delta if delta is None else delta,
                             schedule_times=s.times, schedule_ratio=s.ratio, schedule_m=s.m, **kw)

    def make_env(self, sigma=None):
        e = self.environment
        return make_environment(e["name"], e["sigma"] if sigma is None else sigma, e.get("overrides") or {})


_LEARNER_KEYS = {f for f in LearnerConfig.__dataclass_fields__} - {
    "schedule_kind", "schedule_delta", "schedule_times", "schedule_ratio", "schedule_m"}
_TOP_KEYS = {"schema_version", "environment", "schedule", "learner", "evaluation", "seed", "output_dir", "sweep"}


def _require(cond, path, msg, errors):
    if not cond:
        errors.append(f"field '{path}': {msg}")


def _number(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)


def config_from_dict(d: dict) -> ExperimentConfig:
    """Validate a parsed config; raises ConfigError listing every bad field."""
    errors = []
    if not isinstance(d, dict):
        raise ConfigError("config root must be a JSON object")
    for k in d:
        _require(k in _TOP_KEYS, k, "unknown field", errors)
    sv = d.get("schema_version", SCHEMA_VERSION)
    _require(sv == SCHEMA_VERSION, "schema_version", f"expected {SCHEMA_VERSION}", errors)

    env = d.get("environment", {})
    _require(isinstance(env, dict), "environment", "must be an object", errors)
    env = env if isinstance(env, dict) else {}
    env = {"name": env.get("name", "ou_control"), "sigma": env.get("sigma", 1.0),
           "overrides": env.get("overrides") or {}}
    _require(env["name"] in PRESETS, "environment.name", f"must be one of {sorted(PRESETS)}", errors)
    _require(_number(env["sigma"]) and env["sigma"] >= 0, "environment.sigma", "must be a number >= 0", errors)
    _require(isinstance(env["overrides"], dict), "environment.overrides", "must be an object", errors)

    sd = d.get("schedule", {})
    _require(isinstance(sd, dict), "schedule", "must be an object", errors)
    sd = sd if isinstance(sd, dict) else {}
    for k in sd:
        _require(k in ScheduleSpec.__dataclass_fields__, f"schedule.{k}", "unknown field", errors)
    sched = ScheduleSpec(**{k: v for k, v in sd.items() if k in ScheduleSpec.__dataclass_fields__})
    _require(sched.kind in ("equidistant", "explicit", "geometric"), "schedule.kind",
             "must be equidistant, explicit or geometric", errors)
    if sched.kind == "equidistant":
        _require(_number(sched.delta) and sched.delta > 0, "schedule.delta", "must be a number > 0", errors)

    ld = d.get("learner", {})
    _require(isinstance(ld, dict), "learner", "must be an object", errors)
    ld = ld if isinstance(ld, dict) else {}
    for k in ld:
        _require(k in _LEARNER_KEYS, f"learner.{k}", "unknown field", errors)
    learner = {k: v for k, v in ld.items() if k in _LEARNER_KEYS}
    if "n_episodes" in learner:
        n = learner["n_episodes"]
        _require(isinstance(n, int) and not isinstance(n, bool) and n >= 1, "learner.n_episodes",
                 "must be an integer >= 1", errors)
    if "delta" in learner:
        _require(_number(learner["delta"]) and 0 < learner["delta"] < 1, "learner.delta", "must lie in (0, 1)", errors)

    ed = d.get("evaluation", {})
    _require(isinstance(ed, dict), "evaluation", "must be an object", errors)
    ed = ed if isinstance(ed, dict) else {}
    for k in ed:
        _require(k in EvaluationSpec.__dataclass_fields__, f"evaluation.{k}", "unknown field", errors)
    ev = EvaluationSpec(**{k: v for k, v in ed.items() if k in EvaluationSpec.__dataclass_fields__})
    _require(isinstance(ev.oracle_rollouts, int) and ev.oracle_rollouts >= 2, "evaluation.oracle_rollouts",
             "must be an integer >= 2", errors)
    _require(_number(ev.eps) and ev.eps > 0, "evaluation.eps", "must be a number > 0", errors)
    _require(isinstance(ev.window, int) and ev.window >= 1, "evaluation.window", "must be an integer >= 1", errors)

    seed = d.get("seed", 0)
    _require(isinstance(seed, int) and not isinstance(seed, bool) and seed >= 0, "seed",
             "must be a non-negative integer", errors)
    out = d.get("output_dir", "runs/default")
    _require(isinstance(out, str) and out != "", "output_dir", "must be a non-empty string", errors)

    sw = d.get("sweep")
    if sw is not None:
        _require(isinstance(sw, dict), "sweep", "must be an object", errors)
        sw = sw if isinstance(sw, dict) else {}
        for k in ("sigmas", "deltas"):
            v = sw.get(k)
            _require(isinstance(v, list) and len(v) > 0 and all(_number(x) for x in v), f"sweep.{k}",
                     "must be a non-empty list of numbers", errors)
        ns = sw.get("n_seeds", 5)
        _require(isinstance(ns, int) and ns >= 3, "sweep.n_seeds", "must be an integer >= 3", errors)
        for k in sw:
            _require(k in ("sigmas", "deltas", "n_seeds"), f"sweep.{k}", "unknown field", errors)

    if errors:
        raise ConfigError("\n".join(errors))
    cfg = ExperimentConfig(env, sched, learner, ev, seed, out, sw)
    try:
        lc = cfg.learner_config()
        env = cfg.make_env()
        if env.reward is not None:
            lc.schedule(env.reward.horizon, 0)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"invalid combination: {exc}") from None
    return cfg


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    return config_from_dict(d)


def dump_config(cfg: ExperimentConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n"


def _write_text(path: str, text: str):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _write_csv(path: str, header: list, rows: list):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([fmt(v) for v in r])
    _write_text(path, buf.getvalue())


def _json(obj) -> str:
    def conv(o):
        if isinstance(o, dict):
            return {str(k): conv(v) for k, v in o.items()}
        if isinstance(o, (list, tuple)):
            return [conv(v) for v in o]
        if isinstance(o, (np.floating, float)):
            v = float(o)
            return float(format(v, ".17g")) if math.isfinite(v) else None
        if isinstance(o, (np.integer,)):
            return int(o)
        if isinstance(o, np.bool_):
            return bool(o)
        if isinstance(o, np.ndarray):
            return conv(o.tolist())
        return o
    return json.dumps(conv(obj), indent=2, sort_keys=True) + "\n"


EPISODE_COLUMNS = ["schema_version", "config_hash", "episode", "policy_id", "model_id", "realized_return",
                   "optimistic_value", "optimistic_std_err", "grid_set_size", "augmented_set_size",
                   "intersection_size", "fallback", "true_in_intersection", "m", "rms_gap",
                   "schedule_times", "augmented_times"]
REGRET_COLUMNS = ["schema_version", "config_hash", "episode", "policy_id", "instantaneous", "cumulative",
                  "std_err"]


def episode_rows(records, h: str, true_index: Optional[int]):
    rows = []
    for r in records:
        g, a, i = r.set_sizes
        rows.append([SCHEMA_VERSION, h, r.episode, r.policy_id, r.model_id, r.realized_return,
                     r.optimistic_value, r.optimistic_std_err, g, a, i, r.fallback,
                     "" if true_index is None else (true_index in r.intersection), r.schedule.m,
                     r.schedule.rms_gap, " ".join(fmt(t) for t in r.schedule.times),
                     " ".join(fmt(t) for t in r.augmented.augmented_times)])
    return rows


@dataclass
class RunOutcome:
    config: ExperimentConfig
    result: object
    regret: metrics.RegretCurve
    summary: dict
    oracle_means: np.ndarray


def _oracle(cfg: ExperimentConfig, env, key):
    h = cfg.evaluation.oracle_sim_step or env.reward.horizon / 256
    return metrics.brute_force_optimal(env.policy_class, env.true_model, env.reward,
                                       cfg.evaluation.oracle_rollouts, RngStream(cfg.seed, key),
                                       env.x_ini, h)


def summarize(cfg: ExperimentConfig, env, result, curve, oracle) -> dict:
    u_star, r_star, r_se, means, samples = oracle
    recs = result.records
    N = len(recs)
    m = [r.schedule.m for r in recs]
    rms = [r.schedule.rms_gap for r in recs]
    var_by = {p.id: float(np.var(samples[i], ddof=1)) for i, p in enumerate(env.policy_class)}
    variances = [var_by[r.policy_id] for r in recs]
    n_models = len(env.model_class)
    d = cfg.evaluation.complexity_d or max(n_models - 1, 1)
    lc = cfg.learner_config()
    m_bar = float(sum(m))
    rhs = metrics.regret_bound_rhs(d, result.beta, N, lc.delta, rms, variances, m_bar) if m_bar > 1 else None
    covered = [env.true_index in r.intersection for r in recs] if env.true_in_class else None
    return {
        "schema_version": SCHEMA_VERSION,
        "config_hash": cfg.hash(),
        "n_episodes": N,
        "beta": result.beta,
        "u_star": u_star,
        "R_star": r_star,
        "R_star_std_err": r_se,
        "oracle_values": list(means),
        "regret_total": curve.total,
        "sum_rms_gap_sq": float(np.sum(np.square(rms))),
        "sum_m": int(sum(m)),
        "lambda_total_complexity": {fmt(l): metrics.lambda_total_complexity(l, N, m) for l in (0.0, 0.5, 1.0)},
        "regret_bound_rhs": rhs,
        "regret_bound_d": d,
        "output_policy_id": result.output_policy_id,
        "output_episode": result.output_episode,
        "true_model_always_covered": None if covered is None else all(covered),
        "fallback_episodes": sum(r.fallback for r in recs),
    }


def execute(cfg: ExperimentConfig, sigma=None, delta=None, seed=None, oracle=None, n_episodes=None):
    """Run one experiment in memory and evaluate its regret."""
    if seed is not None:
        cfg = ExperimentConfig(cfg.environment, cfg.schedule, cfg.learner, cfg.evaluation, seed,
                               cfg.output_dir, cfg.sweep)
    env = cfg.make_env(sigma)
    result = run_experiment(env, cfg.learner_config(n_episodes, delta), cfg.seed)
    oracle = oracle or _oracle(cfg, env, ("oracle",))
    curve = metrics.regret_curve(result.records, oracle[0], oracle[4], [p.id for p in env.policy_class])
    return RunOutcome(cfg, result, curve, summarize(cfg, env, result, curve, oracle), oracle[3])


def write_store(cfg: ExperimentConfig, env, result, curve, summary, directory: str):
    os.makedirs(directory, exist_ok=True)
    h = cfg.hash()
    conf = cfg.to_dict()
    conf["config_hash"] = h
    _write_text(os.path.join(directory, "config.json"), _json(conf))
    _write_csv(os.path.join(directory, "episodes.csv"), EPISODE_COLUMNS,
               episode_rows(result.records, h, env.true_index if env.true_in_class else None))
    rows = [[SCHEMA_VERSION, h, r.episode, r.policy_id, curve.instantaneous[i], curve.cumulative[i],
             curve.std_err[i]] for i, r in enumerate(result.records)]
    _write_csv(os.path.join(directory, "regret.csv"), REGRET_COLUMNS, rows)
    _write_text(os.path.join(directory, "summary.json"), _json(summary))
    seeds = {"schema_version": SCHEMA_VERSION, "config_hash": h, "seed": cfg.seed,
             "streams": {"value": ["value"], "environment": ["<episode>", "env"],
                         "schedule": ["<episode>", "schedule"], "output": ["output"], "oracle": ["oracle"]}}
    _write_text(os.path.join(directory, "seeds.json"), _json(seeds))


def cmd_run(args) -> int:
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"config error:\n{exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = args.output or cfg.output_dir
    os.makedirs(out, exist_ok=True)
    env = cfg.make_env()
    records = []
    h = cfg.hash()
    try:
        result = run_experiment(env, cfg.learner_config(), cfg.seed, records)
        oracle = _oracle(cfg, env, ("oracle",))
        curve = metrics.regret_curve(result.records, oracle[0], oracle[4], [p.id for p in env.policy_class])
        summary = summarize(cfg, env, result, curve, oracle)
        write_store(cfg, env, result, curve, summary, out)
    except Exception as exc:  # partial store plus marker
        conf = cfg.to_dict()
        conf["config_hash"] = h
        _write_text(os.path.join(out, "config.json"), _json(conf))
        _write_csv(os.path.join(out, "episodes.csv"), EPISODE_COLUMNS,
                   episode_rows(records, h, env.true_index if env.true_in_class else None))
        _write_text(os.path.join(out, "ERROR"), f"config_hash={h}\nepisodes_completed={len(records)}\n"
                    + "".join(traceback.format_exception_only(type(exc), exc)))
        print(f"runtime failure after {len(records)} episodes: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(_json({k: summary[k] for k in ("config_hash", "n_episodes", "regret_total", "u_star",
                                          "output_policy_id", "regret_bound_rhs")}), end="")
    return EXIT_OK


def spearman_report(sigmas, gaps) -> dict:
    """Spearman correlation; a constant input gives 0 with ``degenerate`` set."""
    if len(set(gaps)) <= 1 or len(set(sigmas)) <= 1:
        return {"spearman": 0.0, "degenerate": True}
    return {"spearman": float(spearmanr(sigmas, gaps)[0]), "degenerate": False}


def run_sweep(cfg: ExperimentConfig, progress=None) -> dict:
    sw = cfg.sweep or {}
    sigmas = [float(s) for s in sw.get("sigmas", [0.0, 1.0, 2.0])]
    deltas = [float(x) for x in sw.get("deltas", [2.0**-k for k in range(4, -1, -1)])]
    seeds = [cfg.seed + i for i in range(int(sw.get("n_seeds", 5)))]
    rows, cells, best = [], {}, {}
    for si, sigma in enumerate(sigmas):
        env = cfg.make_env(sigma)
        oracle = _oracle(cfg, env, ("oracle", si))
        ids = [p.id for p in env.policy_class]
        for delta in deltas:
            times = []
            for seed in seeds:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    res = run_experiment(env, cfg.learner_config(delta=delta), seed)
                curve = metrics.regret_curve(res.records, oracle[0], oracle[4], ids)
                n, censored = metrics.episodes_to_eps(curve.instantaneous, cfg.evaluation.eps,
                                                      cfg.evaluation.window)
                times.append(n)
                rows.append([SCHEMA_VERSION, cfg.hash(), sigma, delta, seed, n, censored, curve.total])
                if progress:
                    progress(sigma, delta, seed, n)
            cells[(sigma, delta)] = float(np.mean(times))
        lowest = min(cells[(sigma, d)] for d in deltas)
        best[sigma] = max(d for d in deltas if cells[(sigma, d)] == lowest)
    report = spearman_report(sigmas, [best[s] for s in sigmas])
    per_sigma_min = {s: min(cells[(s, d)] for d in deltas) for s in sigmas}
    return {"rows": rows, "cells": cells, "best_gap": best, "episodes_at_best": per_sigma_min,
            "sigmas": sigmas, "deltas": deltas, "seeds": seeds, **report}


SWEEP_COLUMNS = ["schema_version", "config_hash", "sigma", "delta", "seed", "episodes_to_eps", "censored",
                 "regret_total"]


def cmd_sweep(args) -> int:
    try:
        cfg = load_config(args.config)
        if cfg.sweep is None:
            raise ConfigError("field 'sweep': required for the sweep command")
    except ConfigError as exc:
        print(f"config error:\n{exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = args.output or cfg.output_dir
    os.makedirs(out, exist_ok=True)
    try:
        rep = run_sweep(cfg)
    except Exception as exc:
        _write_text(os.path.join(out, "ERROR"), f"config_hash={cfg.hash()}\n"
                    + "".join(traceback.format_exception_only(type(exc), exc)))
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    conf = cfg.to_dict()
    conf["config_hash"] = cfg.hash()
    _write_text(os.path.join(out, "config.json"), _json(conf))
    _write_csv(os.path.join(out, "sweep.csv"), SWEEP_COLUMNS, rep["rows"])
    lo, hi = min(rep["sigmas"]), max(rep["sigmas"])
    mono = {
        "schema_version": SCHEMA_VERSION,
        "config_hash": cfg.hash(),
        "best_gap": {fmt(s): g for s, g in rep["best_gap"].items()},
        "mean_episodes": {f"{fmt(s)}|{fmt(d)}": v for (s, d), v in rep["cells"].items()},
        "spearman": rep["spearman"],
        "degenerate": rep["degenerate"],
        "episodes_low_sigma": rep["episodes_at_best"][lo],
        "episodes_high_sigma": rep["episodes_at_best"][hi],
    }
    _write_text(os.path.join(out, "monotonicity.json"), _json(mono))
    print(_json(mono), end="")
    return EXIT_OK


# verification suites ---------------------------------------------------------

def _check(name, passed, **detail):
    return {"name": name, "passed": bool(passed), **detail}


def suite_density(n_pairs: int = 100, seed: int = 0) -> list:
    out = []
    fam = density.rotation_fixture()
    y = fam.grid()
    from scipy.integrate import simpson
    for t in np.linspace(0, 2 * np.pi, 32):
        mass = float(simpson(density.quadratic_density_eval(fam, 0, None, None, t, y), x=y))
        out.append(_check(f"normalization t={t:.4f}", abs(mass - 1) <= 1e-6, value=mass))
    rng = np.random.default_rng(seed)
    params = [(-rng.uniform(1, 3), rng.uniform(0.5, 1.5), rng.uniform(1, 3), rng.uniform(0.5, 1.5)) for _ in range(8)]
    sf = density.split_fixture(params)
    worst = 0.0
    for _ in range(n_pairs):
        a, b = (int(v) for v in rng.integers(0, len(params), 2))
        t = float(rng.uniform(0, 2 * np.pi))
        lin = density.hellinger_sq_quadratic(sf, a, b, None, None, t)
        num = density.numerical_hellinger(sf.density(a, None, None, t), sf.density(b, None, None, t),
                                          sf.support, 6001)
        worst = max(worst, abs(lin - num))
    out.append(_check("linear Hellinger form vs quadrature", worst <= 1e-6, max_abs_error=worst))
    worst = 0.0
    for _ in range(n_pairs):
        m1, m2 = rng.normal(0, 2, 2)
        v1, v2 = rng.uniform(0.2, 3, 2)
        p = density.GaussianTransition([m1], [[v1]])
        q = density.GaussianTransition([m2], [[v2]])
        num = density.numerical_hellinger(lambda z: np.exp(-(z - m1) ** 2 / (2 * v1)) / np.sqrt(2 * np.pi * v1),
                                          lambda z: np.exp(-(z - m2) ** 2 / (2 * v2)) / np.sqrt(2 * np.pi * v2),
                                          (-30, 30), 20001)
        worst = max(worst, abs(density.hellinger_sq_gaussian(p, q) - num))
    out.append(_check("Gaussian Hellinger vs quadrature", worst <= 1e-6, max_abs_error=worst))
    return out


def suite_bellman(n_triples: int = 50, n_rollouts: int = 4096, sim_step: float = 1 / 1024,
                  seed: int = 0, sigma: float = 1.0) -> list:
    env = make_environment("ou_control", sigma)
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_triples):
        x = float(rng.uniform(-2, 2))
        s = float(rng.uniform(0, 0.9))
        gap = float(rng.uniform(0.01, 1.0 - s))
        pol = env.policy_class[int(rng.integers(len(env.policy_class)))]
        c = metrics.bellman_check(env.true_model, pol, env.reward, [x], s, gap, n_rollouts, sim_step,
                                  RngStream(seed, ("bellman", i)))
        out.append(_check(f"triple {i}", c.passed, x=x, s=s, gap=gap, policy=pol.id, lhs=c.lhs, rhs=c.rhs,
                          se=c.combined_se))
    c = metrics.bellman_check(env.true_model, env.policy_class[0], env.reward, [0.5], 0.0, 1.0, n_rollouts,
                              sim_step, RngStream(seed, ("bellman", "terminal")))
    out.append(_check("gap equal to horizon", c.passed, lhs=c.lhs, rhs=c.rhs, se=c.combined_se))
    return out


def suite_variance(sigmas=(0.1, 0.5, 1.0), n_rollouts: int = 4096, seed: int = 0) -> list:
    out = []
    for sigma in (0.0,) + tuple(sigmas):
        env = make_environment("ou_control", sigma)
        kc = env.known_constants
        for p in env.policy_class:
            v, se = metrics.total_variance(env.true_model, p, env.reward, n_rollouts, env.reward.horizon / 256,
                                           RngStream(seed, ("variance", fmt(sigma), p.id)), env.x_ini)
            if sigma == 0.0:
                out.append(_check(f"sigma=0 policy {p.id} zero variance", v < 1e-10, var=v))
                continue
            bound = metrics.gronwall_variance_bound(kc["L_b"], kc["L_f"], p.lipschitz_hint, kc["G_frob"],
                                                    env.reward.horizon)
            out.append(_check(f"sigma={sigma:g} policy {p.id} growth bound", v <= min(1.0, bound) + 3 * se,
                              var=v, se=se, bound=bound))
            out.append(_check(f"sigma={sigma:g} policy {p.id} unit bound", v <= 1 + 3 * se, var=v, se=se))
    return out


def suite_decomposition(n_episodes: int = 20, budget: int = 256, seed: int = 0, sigma: float = 1.0) -> list:
    env = make_environment("ou_control", sigma)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = run_experiment(env, LearnerConfig(n_episodes=n_episodes, keep_trajectories=True), seed)
    out = []
    for rec in res.records:
        pol = env.policy(rec.policy_id)
        rep = metrics.simulation_decomposition(rec, env.model(rec.model_id), env.true_model, pol, env.reward,
                                               budget, RngStream(seed, ("decomposition", rec.episode)))
        out.append(_check(f"episode {rec.episode} residual", rep.residual <= 3 * rep.residual_se,
                          residual=rep.residual, se=rep.residual_se))
        same = metrics.simulation_decomposition(rec, env.true_model, env.true_model, pol, env.reward, budget,
                                                RngStream(seed, ("decomposition-true", rec.episode)))
        ok3 = bool(np.all(np.abs(same.I3) <= 3 * same.I3_se))
        ok4 = bool(np.all(np.abs(same.I4) <= 3 * same.I4_se))
        out.append(_check(f"episode {rec.episode} identical models", ok3 and ok4,
                          max_I3=float(np.max(np.abs(same.I3))), max_I4=float(np.max(np.abs(same.I4)))))
    return out


def rotation_psi(shifts=(0.0, 0.25, 0.5, 1.0, 2.0), n_t: int = 200) -> np.ndarray:
    """Hellinger discrepancies of rotated fixture models against model 0 on a time grid."""
    fam = density.rotation_fixture(shifts)
    ts = np.linspace(0, 2 * np.pi, n_t)
    y = fam.grid()
    psi = np.zeros((len(shifts), n_t))
    for j in range(len(shifts)):
        for i, t in enumerate(ts):
            psi[j, i] = density.numerical_hellinger(fam.density(j, None, None, t), fam.density(0, None, None, t),
                                                    fam.support, y.size)
    return psi


def suite_eluder(eps_values=(0.1, 0.01)) -> list:
    psi = rotation_psi()
    d, B = 2, 2.0
    out = []
    # the sum condition tightens as eps shrinks, so estimates need not be monotone in eps
    for eps in sorted(eps_values, reverse=True):
        est = metrics.eluder_estimate(psi, eps)
        bound = 4 * d**2 * math.log(1 + B**2 / eps**2)
        out.append(_check(f"eps={eps:g} bound", est <= bound, estimate=est, bound=bound))
    single = metrics.eluder_estimate(psi[:1], 0.01)
    out.append(_check("singleton class", single == 0, estimate=single))
    return out


SUITES = {
    "density": suite_density,
    "bellman": suite_bellman,
    "variance": suite_variance,
    "decomposition": suite_decomposition,
    "eluder": suite_eluder,
}


def cmd_verify(args) -> int:
    names = list(SUITES) if args.suite == "all" else [args.suite]
    report = {"schema_version": SCHEMA_VERSION, "suites": {}}
    failed = []
    try:
        for name in names:
            checks = SUITES[name]()
            report["suites"][name] = {"passed": all(c["passed"] for c in checks), "checks": checks}
            failed += [f"{name}: {c['name']}" for c in checks if not c["passed"]]
    except Exception as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    report["passed"] = not failed
    report["failures"] = failed
    print(_json(report), end="")
    return EXIT_OK if not failed else EXIT_CHECK


def complexity_table(d, eps, var, T, gap, lam) -> dict:
    inp = metrics.ComplexityInputs(d, eps, var, T, gap, lam)
    terms = metrics.complexity_terms(inp)
    at = {}
    for l in (0.0, 0.5, 1.0):
        at[fmt(l)] = metrics.eval_complexity_bound(metrics.ComplexityInputs(d, eps, var, T, gap, l))
    g0 = metrics.lambda0_gap(var, T)
    return {
        "terms": terms,
        "total": sum(terms.values()),
        "total_by_lambda": at,
        "lambda0_gap": g0,
        "lambda0_dominant_term": d**2 * var / eps**2,
        "lambda1_gap": metrics.lambda1_gap(T),
    }


def cmd_complexity(args) -> int:
    try:
        tab = complexity_table(args.d, args.eps, args.var, args.T, args.delta, args.lam)
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    lines = ["term                       value"]
    for k, v in tab["terms"].items():
        lines.append(f"{k:<26} {fmt(v)}")
    lines.append(f"{'total':<26} {fmt(tab['total'])}")
    for l, v in tab["total_by_lambda"].items():
        lines.append(f"{'total at lambda=' + l:<26} {fmt(v)}")
    lines.append(f"{'lambda=0 gap (var/T)':<26} {fmt(tab['lambda0_gap'])}")
    lines.append(f"{'lambda=0 dominant d^2 var/eps^2':<26} {fmt(tab['lambda0_dominant_term'])}")
    lines.append(f"{'lambda=1 gap (T)':<26} {fmt(tab['lambda1_gap'])}")
    print("\n".join(lines))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ctmle", description="Continuous-time MLE learning experiments")
    sub = ap.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", help="run one experiment and write its store")
    p.add_argument("--config", required=True)
    p.add_argument("--output", default=None, help="override output_dir")
    p.set_defaults(func=cmd_run)
    p = sub.add_parser("sweep", help="grid over volatility and measurement gap")
    p.add_argument("--config", required=True)
    p.add_argument("--output", default=None)
    p.set_defaults(func=cmd_sweep)
    p = sub.add_parser("verify", help="run an invariant suite")
    p.add_argument("--suite", required=True, choices=sorted(SUITES) + ["all"])
    p.set_defaults(func=cmd_verify)
    p = sub.add_parser("complexity", help="print the complexity bound table")
    p.add_argument("--d", type=float, required=True)
    p.add_argument("--eps", type=float, required=True)
    p.add_argument("--var", type=float, required=True)
    p.add_argument("--T", type=float, required=True)
    p.add_argument("--delta", type=float, required=True, help="measurement gap")
    p.add_argument("--lambda", dest="lam", type=float, default=0.0)
    p.set_defaults(func=cmd_complexity)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
