"""Online optimistic learning with MLE confidence sets.

Each episode builds two confidence sets from cached log-likelihoods (grid
observations and randomized mid-gap observations), picks the most optimistic
(policy, model) pair among the plausible models, runs the policy once in the
true environment and appends the new transitions.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .density import TransitionKernel, log_density_batch, transition_batch
from .sde_core import (
    Policy,
    RewardSpec,
    RngStream,
    SdeModel,
    Trajectory,
    integrate_reward,
    rollout,
    simulate_trajectory,
    time_steps,
)

__all__ = [
    "MeasurementSchedule",
    "AugmentedSchedule",
    "build_schedule",
    "randomize_schedule",
    "TransitionSample",
    "Dataset",
    "ConfidenceSet",
    "kernel_for",
    "log_likelihood",
    "confidence_set",
    "estimate_return",
    "estimate_value",
    "value_table",
    "optimistic_select",
    "LearnerConfig",
    "LearnerState",
    "EpisodeRecord",
    "ExperimentResult",
    "run_episode",
    "run_experiment",
    "EmptyIntersectionWarning",
]


class EmptyIntersectionWarning(UserWarning):
    pass


@dataclass(frozen=True, eq=False)
class MeasurementSchedule:
    times: np.ndarray
    episode: int = 0

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        if t.ndim != 1 or t.size < 2:
            raise ValueError("a schedule needs at least two times")
        if t[0] != 0.0:
            raise ValueError("schedules start at time 0")
        if np.any(np.diff(t) <= 0):
            raise ValueError("schedule times must strictly increase")
        object.__setattr__(self, "times", t)

    @property
    def gaps(self) -> np.ndarray:
        return np.diff(self.times)

    @property
    def m(self) -> int:
        return self.times.size - 1

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    @property
    def rms_gap(self) -> float:
        """Root sum of squared gaps."""
        return float(np.sqrt(np.sum(self.gaps**2)))


@dataclass(frozen=True, eq=False)
class AugmentedSchedule:
    base: MeasurementSchedule
    offsets: np.ndarray

    def __post_init__(self):
        off = np.asarray(self.offsets, dtype=float)
        if off.shape != (self.base.m,):
            raise ValueError("one offset per gap is required")
        if np.any(off <= 0) or np.any(off >= self.base.gaps):
            raise ValueError("offsets must lie strictly inside their gaps")
        object.__setattr__(self, "offsets", off)

    @property
    def augmented_times(self) -> np.ndarray:
        return self.base.times[:-1] + self.offsets

    @property
    def n_measurements(self) -> int:
        return 2 * self.base.m


def build_schedule(kind: str, horizon: float, episode: int = 0, delta: Optional[float] = None,
                   times: Optional[Sequence[float]] = None, ratio: Optional[float] = None,
                   m: Optional[int] = None) -> MeasurementSchedule:
    """Measurement grid over ``[0, horizon]``.

    kind="equidistant" uses step ``delta`` with a truncated last gap;
    kind="explicit" takes ``times`` (0 and ``horizon`` are added when missing);
    kind="geometric" uses ``m`` gaps growing by ``ratio``.
    """
    T = float(horizon)
    if not T > 0:
        raise ValueError("horizon must be positive")
    if kind == "equidistant":
        if delta is None or not delta > 0:
            raise ValueError("equidistant schedules need delta > 0")
        if delta > T * (1 + 1e-12):
            raise ValueError("delta exceeds the horizon")
        n = max(1, math.ceil(T / delta - 1e-9))
        t = np.minimum(np.arange(n + 1) * float(delta), T)
        t[-1] = T
    elif kind == "explicit":
        if times is None or len(times) == 0:
            raise ValueError("explicit schedules need a non-empty list of times")
        t = np.asarray(times, dtype=float)
        if np.any(np.diff(t) <= 0):
            raise ValueError("explicit times must strictly increase")
        if t[0] < 0 or t[-1] > T:
            raise ValueError("explicit times must lie in [0, horizon]")
        if t[0] > 0:
            t = np.concatenate([[0.0], t])
        if t[-1] < T:
            t = np.concatenate([t, [T]])
    elif kind == "geometric":
        if ratio is None or not ratio > 0 or m is None or m < 1:
            raise ValueError("geometric schedules need ratio > 0 and m >= 1")
        w = float(ratio) ** np.arange(m)
        t = np.concatenate([[0.0], np.cumsum(w / w.sum()) * T])
        t[-1] = T
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    return MeasurementSchedule(t, episode)


def randomize_schedule(s: MeasurementSchedule, rng: RngStream) -> AugmentedSchedule:
    """One uniform offset inside every gap."""
    u = rng.generator().random(s.m)
    # random() lives in [0, 1); nudge an exact zero inside the open interval
    u = np.clip(u, np.finfo(float).tiny, np.nextafter(1.0, 0.0))
    off = u * s.gaps
    off = np.clip(off, np.nextafter(0.0, 1.0), np.nextafter(s.gaps, 0.0))
    return AugmentedSchedule(s, off)


@dataclass(frozen=True, eq=False)
class TransitionSample:
    policy_id: int
    x_from: np.ndarray
    x_to: np.ndarray
    gap: float
    tag: str = "grid"

    def __post_init__(self):
        if not self.gap > 0:
            raise ValueError("transition gap must be positive")
        if self.tag not in ("grid", "augmented"):
            raise ValueError(f"unknown tag {self.tag!r}")


class Dataset:
    """Append-only store of transitions, split into grid and augmented parts."""

    def __init__(self):
        self._parts = {"grid": [], "augmented": []}

    def append(self, sample: TransitionSample):
        self._parts[sample.tag].append(sample)

    def extend(self, samples):
        for s in samples:
            self.append(s)

    def partition(self, tag: str) -> list:
        return list(self._parts[tag])

    def __len__(self) -> int:
        return sum(len(v) for v in self._parts.values())


@dataclass(frozen=True)
class ConfidenceSet:
    member_ids: tuple
    radius: float
    best_loglik: float

    def __contains__(self, model_id) -> bool:
        return model_id in self.member_ids

    def __len__(self) -> int:
        return len(self.member_ids)


def kernel_for(model: SdeModel, policy: Policy, mode: str = "auto") -> TransitionKernel:
    if mode == "auto":
        mode = ("closed_form_linear" if model.kind == "linear_gaussian" and policy.is_linear
                else "euler_gaussian")
    return TransitionKernel(model, policy, mode)


def _loglik_rows(model, policies, policy_ids, x_from, x_to, gaps, mode) -> np.ndarray:
    out = np.empty(len(gaps))
    for pid in np.unique(policy_ids):
        idx = policy_ids == pid
        k = kernel_for(model, policies[int(pid)], mode)
        means, covs = transition_batch(k, x_from[idx], gaps[idx])
        out[idx] = log_density_batch(means, covs, x_to[idx])
    return out


def _stack_samples(samples):
    pid = np.array([s.policy_id for s in samples], dtype=int)
    xf = np.array([np.atleast_1d(s.x_from) for s in samples], dtype=float)
    xt = np.array([np.atleast_1d(s.x_to) for s in samples], dtype=float)
    gaps = np.array([s.gap for s in samples], dtype=float)
    return pid, xf, xt, gaps


def log_likelihood(model: SdeModel, policies, samples: Sequence[TransitionSample],
                   mode: str = "auto") -> float:
    """Sum of transition log-densities of ``samples`` under ``model``.

    ``policies`` maps policy ids to :class:`Policy` objects (a list indexed by
    id works).  All samples must carry the same tag.
    """
    if len(samples) == 0:
        return 0.0
    if len({s.tag for s in samples}) > 1:
        raise ValueError("grid and augmented samples cannot share one likelihood")
    return float(_loglik_rows(model, policies, *_stack_samples(samples), mode).sum())


def confidence_set(logliks: Sequence[float], beta: float, ids: Optional[Sequence[int]] = None) -> ConfidenceSet:
    """Models whose log-likelihood is within ``beta`` of the best one."""
    if beta < 0:
        raise ValueError("beta must be non-negative")
    L = np.asarray(logliks, dtype=float)
    if L.size == 0:
        raise ValueError("empty model class")
    ids = np.arange(L.size) if ids is None else np.asarray(ids)
    best = float(L.max())
    members = tuple(int(i) for i in ids[L >= best - beta])
    return ConfidenceSet(members, float(beta), best)


def _value_steps(duration: float, sim_step: float) -> np.ndarray:
    return time_steps(duration, min(sim_step, duration))


def value_table(pairs, reward: RewardSpec, x0, duration: float, n_rollouts: int,
                sim_step: float, rng: RngStream):
    """Monte Carlo values of every pair on one shared set of noise draws.

    Returns ``(mean, std_err, samples)`` with shapes (P,), (P,), (P, R).
    """
    if n_rollouts < 1:
        raise ValueError("n_rollouts must be at least 1")
    x0 = np.asarray(x0, dtype=float)
    l = pairs[0][1].state_dim
    steps = _value_steps(duration, sim_step)
    z = rng.generator().standard_normal((len(steps), n_rollouts, l))
    _, integral, _ = rollout(pairs, x0, steps, z, reward=reward)
    mean = integral.mean(axis=1)
    se = integral.std(axis=1, ddof=1) / math.sqrt(n_rollouts) if n_rollouts > 1 else np.zeros(len(pairs))
    return mean, se, integral


def estimate_value(model: SdeModel, policy: Policy, reward: RewardSpec, x, s: float,
                   n_rollouts: int, sim_step: float, rng: RngStream):
    """Monte Carlo value ``E int_s^T b dt`` starting from state ``x`` at time ``s``."""
    remaining = reward.horizon - s
    if remaining < -1e-12:
        raise ValueError("start time beyond the horizon")
    if remaining <= 1e-12:
        return 0.0, 0.0
    mean, se, _ = value_table([(policy, model)], reward, x, remaining, n_rollouts, sim_step, rng)
    return float(mean[0]), float(se[0])


def estimate_return(model: SdeModel, policy: Policy, reward: RewardSpec, n_rollouts: int,
                    sim_step: float, rng: RngStream, x_ini=0.0):
    """Mean and standard error of the horizon return under ``model``."""
    return estimate_value(model, policy, reward, np.atleast_1d(x_ini), 0.0, n_rollouts, sim_step, rng)


def optimistic_select(policy_class: Sequence[Policy], members: Sequence[SdeModel],
                      reward: RewardSpec, n_rollouts: int, sim_step: float, rng: RngStream,
                      x_ini=0.0, table: Optional[dict] = None):
    """Best (policy, model) pair over ``policy_class`` x ``members``.

    Values come from ``table`` (keyed by ``(policy_id, model_id)``) when
    given, otherwise from one common-random-number scan.  Ties go to the
    smallest ``(policy_id, model_id)``.  Returns
    ``(policy_id, model_id, value, std_err)``.
    """
    if len(policy_class) == 0:
        raise ValueError("empty policy class")
    if len(members) == 0:
        raise ValueError("no candidate models")
    if table is None:
        pairs = [(p, m) for p in policy_class for m in members]
        mean, se, _ = value_table(pairs, reward, np.atleast_1d(x_ini), reward.horizon,
                                  n_rollouts, sim_step, rng)
        table = {(p.id, m.id): (float(v), float(e)) for (p, m), v, e in zip(pairs, mean, se)}
    best = None
    for key in sorted((p.id, m.id) for p in policy_class for m in members):
        v = table[key][0]
        if best is None or v > table[best][0]:
            best = key
    return best[0], best[1], table[best][0], table[best][1]


@dataclass
class LearnerConfig:
    """Tunable parameters of the learning loop.

    ``value_refresh="experiment"`` evaluates the optimistic value table once
    on a fixed stream and reuses it, ``"episode"`` redraws it every episode.
    """

    n_episodes: int = 200
    delta: float = 0.1
    beta_mode: str = "standard"
    schedule_kind: str = "equidistant"
    schedule_delta: Optional[float] = 0.25
    schedule_times: Optional[list] = None
    schedule_ratio: Optional[float] = None
    schedule_m: Optional[int] = None
    value_rollouts: int = 256
    value_sim_step: Optional[float] = None
    env_sim_step: Optional[float] = None
    kernel_mode: str = "auto"
    value_refresh: str = "experiment"
    keep_trajectories: bool = False

    def __post_init__(self):
        if self.n_episodes < 1:
            raise ValueError("n_episodes must be at least 1")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if self.beta_mode not in ("standard", "doubled"):
            raise ValueError("beta_mode is 'standard' or 'doubled'")
        if self.value_refresh not in ("experiment", "episode"):
            raise ValueError("value_refresh is 'experiment' or 'episode'")
        if self.value_rollouts < 1:
            raise ValueError("value_rollouts must be at least 1")

    def schedule(self, horizon: float, episode: int) -> MeasurementSchedule:
        return build_schedule(self.schedule_kind, horizon, episode, delta=self.schedule_delta,
                              times=self.schedule_times, ratio=self.schedule_ratio,
                              m=self.schedule_m)

    def beta(self, n_models: int) -> float:
        # the model class is stored flat, so |F||G| = n_models
        scale = 2.0 if self.beta_mode == "doubled" else 1.0
        return math.log(scale * n_models * self.n_episodes / self.delta)


@dataclass
class EpisodeRecord:
    episode: int
    policy_id: int
    model_id: int
    schedule: MeasurementSchedule
    augmented: AugmentedSchedule
    realized_return: float
    optimistic_value: float
    optimistic_std_err: float
    grid_set: ConfidenceSet
    augmented_set: ConfidenceSet
    intersection: tuple
    fallback: bool
    stream_keys: dict
    trajectory: Optional[Trajectory] = None

    @property
    def set_sizes(self) -> tuple:
        return len(self.grid_set), len(self.augmented_set), len(self.intersection)


class LearnerState:
    """Running log-likelihood sums per model for both partitions."""

    def __init__(self, env, config: LearnerConfig, seed: int):
        self.env = env
        self.config = config
        self.seed = int(seed)
        self.root = RngStream(self.seed)
        self.models = list(env.model_class)
        self.policies = list(env.policy_class)
        self.policy_by_id = {p.id: p for p in self.policies}
        self.model_ids = np.array([m.id for m in self.models])
        self.loglik = {"grid": np.zeros(len(self.models)), "augmented": np.zeros(len(self.models))}
        self.dataset = Dataset()
        self.beta = config.beta(len(self.models))
        self.episode = 0
        self._table = None

    @property
    def horizon(self) -> float:
        return self.env.reward.horizon

    def value_sim_step(self) -> float:
        return self.config.value_sim_step or self.horizon / 256

    def env_sim_step(self, schedule: MeasurementSchedule) -> float:
        if self.config.env_sim_step is not None:
            return self.config.env_sim_step
        return min(self.horizon / 1000, float(schedule.gaps.min()) / 64)

    def table(self, episode: int) -> dict:
        cfg = self.config
        if cfg.value_refresh == "experiment" and self._table is not None:
            return self._table
        key = ("value",) if cfg.value_refresh == "experiment" else (episode, "value")
        pairs = [(p, m) for p in self.policies for m in self.models]
        mean, se, _ = value_table(pairs, self.env.reward, self.env.x_ini, self.horizon,
                                  cfg.value_rollouts, self.value_sim_step(), self.root.child(*key))
        tab = {(p.id, m.id): (float(v), float(e)) for (p, m), v, e in zip(pairs, mean, se)}
        if cfg.value_refresh == "experiment":
            self._table = tab
        return tab

    def add(self, samples: Sequence[TransitionSample]):
        self.dataset.extend(samples)
        for tag in ("grid", "augmented"):
            part = [s for s in samples if s.tag == tag]
            if not part:
                continue
            stacked = _stack_samples(part)
            for j, m in enumerate(self.models):
                self.loglik[tag][j] += _loglik_rows(m, self.policy_by_id, *stacked,
                                                    self.config.kernel_mode).sum()


def _observe(traj: Trajectory, schedule: MeasurementSchedule, aug: AugmentedSchedule, policy_id: int):
    """Transitions read off the executed path at the nearest internal grid points."""
    idx = np.array([traj.index_of(t) for t in schedule.times])
    if np.any(np.diff(idx) <= 0):
        raise ValueError("simulation grid too coarse for the measurement schedule")
    aidx = np.array([traj.index_of(t) for t in aug.augmented_times])
    aidx = np.clip(aidx, idx[:-1] + 1, idx[1:])
    t, x = traj.times, traj.states
    samples = []
    for k in range(schedule.m):
        i0, i1, ia = idx[k], idx[k + 1], aidx[k]
        samples.append(TransitionSample(policy_id, x[i0].copy(), x[i1].copy(), float(t[i1] - t[i0]), "grid"))
        samples.append(TransitionSample(policy_id, x[i0].copy(), x[ia].copy(), float(t[ia] - t[i0]), "augmented"))
    return samples


def run_episode(state: LearnerState, episode: int) -> EpisodeRecord:
    cfg, env = state.config, state.env
    grid_set = confidence_set(state.loglik["grid"], state.beta, state.model_ids)
    aug_set = confidence_set(state.loglik["augmented"], state.beta, state.model_ids)
    inter = tuple(i for i in grid_set.member_ids if i in aug_set)
    fallback = len(inter) == 0
    if fallback:
        warnings.warn(f"episode {episode}: confidence sets do not intersect, using the grid set",
                      EmptyIntersectionWarning)
        inter = grid_set.member_ids
    members = [m for m in state.models if m.id in inter]
    pid, mid, val, se = optimistic_select(state.policies, members, env.reward, cfg.value_rollouts,
                                          state.value_sim_step(), None, env.x_ini,
                                          table=state.table(episode))
    policy = state.policy_by_id[pid]
    schedule = cfg.schedule(state.horizon, episode)
    aug = randomize_schedule(schedule, state.root.child(episode, "schedule"))
    traj = simulate_trajectory(env.true_model, policy, env.x_ini, state.horizon,
                               state.env_sim_step(schedule), state.root.child(episode, "env"))
    ret = integrate_reward(traj, env.reward, policy)
    state.add(_observe(traj, schedule, aug, pid))
    state.episode = episode + 1
    keys = {"env": [episode, "env"], "schedule": [episode, "schedule"],
            "value": ["value"] if cfg.value_refresh == "experiment" else [episode, "value"]}
    return EpisodeRecord(episode, pid, mid, schedule, aug, ret, val, se, grid_set, aug_set,
                         inter, fallback, keys, traj if cfg.keep_trajectories else None)


@dataclass
class ExperimentResult:
    records: list
    output_policy_id: int
    output_episode: int
    beta: float
    value_table: dict = field(default_factory=dict)

    @property
    def n_episodes(self) -> int:
        return len(self.records)


def run_experiment(env, config: LearnerConfig, seed: int, records: Optional[list] = None) -> ExperimentResult:
    """Run ``config.n_episodes`` episodes and draw the returned policy uniformly.

    Records are appended to ``records`` as they complete, so a caller keeps
    the finished episodes when a later one fails.
    """
    state = LearnerState(env, config, seed)
    records = [] if records is None else records
    for n in range(config.n_episodes):
        records.append(run_episode(state, n))
    pick = int(state.root.child("output").generator().integers(config.n_episodes))
    tab = state._table or {}
    return ExperimentResult(records, records[pick].policy_id, pick, state.beta, tab)
