"""Regret, variance, complexity and diagnostic quantities.

Monte Carlo estimators return ``(estimate, std_err)`` pairs so callers can
compare against tolerances expressed in standard errors.  Closed-form
bounds take their constants as 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.integrate import trapezoid

from .density import TransitionKernel, transition
from .learner import EpisodeRecord, kernel_for, value_table
from .sde_core import (
    Policy,
    RewardSpec,
    RngStream,
    SdeModel,
    Trajectory,
    integrate_reward,
    rollout,
    time_steps,
)

__all__ = [
    "beta_radius",
    "total_variance",
    "gronwall_variance_bound",
    "policy_values",
    "brute_force_optimal",
    "RegretCurve",
    "regret_curve",
    "loglog_slope",
    "episodes_to_eps",
    "regret_bound_rhs",
    "lambda_total_complexity",
    "ComplexityInputs",
    "complexity_terms",
    "eval_complexity_bound",
    "lambda0_gap",
    "lambda1_gap",
    "lambda0_order",
    "eluder_estimate",
    "DecompositionReport",
    "simulation_decomposition",
    "var_square_property",
    "BellmanCheck",
    "bellman_check",
]


def beta_radius(F_size: int, G_size: int, N: int, delta: float, doubled: bool = False) -> float:
    if F_size < 1 or G_size < 1 or N < 1:
        raise ValueError("class sizes and N must be at least 1")
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    return math.log((2.0 if doubled else 1.0) * F_size * G_size * N / delta)


def _sample_variance_se(x: np.ndarray) -> tuple[float, float]:
    n = x.size
    var = float(np.var(x, ddof=1))
    m4 = float(np.mean((x - x.mean()) ** 4))
    # large-sample variance of the unbiased sample variance
    v = (m4 - var**2 * (n - 3) / (n - 1)) / n
    return var, math.sqrt(max(v, 0.0))


def total_variance(model: SdeModel, policy: Policy, reward: RewardSpec, n_rollouts: int,
                   sim_step: float, rng: RngStream, x_ini=0.0) -> tuple[float, float]:
    """Sample variance of the horizon reward integral and its standard error."""
    if n_rollouts < 2:
        raise ValueError("n_rollouts must be at least 2")
    _, _, samples = value_table([(policy, model)], reward, np.atleast_1d(x_ini), reward.horizon,
                                n_rollouts, sim_step, rng)
    return _sample_variance_se(samples[0])


def gronwall_variance_bound(L_b: float, L_f: float, L_u: float, G_frob: float, T: float) -> float:
    if not L_f > 0:
        raise ValueError("L_f must be positive")
    if min(L_b, L_u, G_frob, T) < 0:
        raise ValueError("constants must be non-negative")
    rate = 2.0 * L_f * (1.0 + L_u) * T
    if rate > 700:
        return 1.0 if G_frob > 0 and L_b > 0 and T > 0 else 0.0
    val = G_frob**2 * T * L_b**2 * (1.0 + L_u) / (2.0 * L_f) * math.expm1(rate)
    return min(1.0, val)


def policy_values(policy_class: Sequence[Policy], model: SdeModel, reward: RewardSpec, budget: int,
                  sim_step: float, rng: RngStream, x_ini=0.0):
    """Common-random-number values of every policy under one model."""
    pairs = [(p, model) for p in policy_class]
    return value_table(pairs, reward, np.atleast_1d(x_ini), reward.horizon, budget, sim_step, rng)


def brute_force_optimal(policy_class: Sequence[Policy], true_model: SdeModel, reward: RewardSpec,
                        budget: int, rng: RngStream, x_ini=0.0, sim_step: Optional[float] = None):
    """Exhaustive scan; returns ``(policy_id, value, std_err, means, samples)``."""
    if len(policy_class) == 0:
        raise ValueError("empty policy class")
    h = sim_step or reward.horizon / 256
    mean, se, samples = policy_values(policy_class, true_model, reward, budget, h, rng, x_ini)
    i = int(np.argmax(mean))
    return policy_class[i].id, float(mean[i]), float(se[i]), mean, samples


@dataclass
class RegretCurve:
    instantaneous: np.ndarray
    cumulative: np.ndarray
    std_err: np.ndarray

    @property
    def total(self) -> float:
        return float(self.cumulative[-1]) if self.cumulative.size else 0.0


def regret_curve(records: Sequence[EpisodeRecord], u_star: int, samples: np.ndarray,
                 policy_ids: Optional[Sequence[int]] = None) -> RegretCurve:
    """Instantaneous and cumulative regret of the executed policies.

    ``samples`` holds the oracle-budget returns of every policy under the
    true model on shared noise (row order given by ``policy_ids``, default
    ``0..P-1``), as returned by :func:`brute_force_optimal`.
    """
    ids = list(range(samples.shape[0])) if policy_ids is None else list(policy_ids)
    row = {pid: i for i, pid in enumerate(ids)}
    R = samples.shape[1]
    diff = samples[row[u_star]][None, :] - samples
    inst_by = diff.mean(axis=1)
    se_by = diff.std(axis=1, ddof=1) / math.sqrt(R) if R > 1 else np.zeros(len(ids))
    chosen = np.array([row[r.policy_id] for r in records], dtype=int)
    inst = inst_by[chosen]
    return RegretCurve(inst, np.cumsum(inst), se_by[chosen])


def loglog_slope(cumulative: np.ndarray, start: int = 50, stop: Optional[int] = None) -> float:
    """Least-squares slope of log cumulative regret against log episode on ``[start, stop]``."""
    stop = len(cumulative) if stop is None else stop
    n = np.arange(start, stop + 1)
    y = np.asarray(cumulative, dtype=float)[start - 1:stop]
    if np.any(y <= 0):
        return float("nan")
    return float(np.polyfit(np.log(n), np.log(y), 1)[0])


def episodes_to_eps(instantaneous: np.ndarray, eps: float, window: int = 20):
    """First episode (1-based) whose trailing-window mean regret is at most ``eps``.

    Returns ``(n, censored)``; runs that never get there report ``len`` and
    ``censored=True``.
    """
    r = np.asarray(instantaneous, dtype=float)
    c = np.concatenate([[0.0], np.cumsum(r)])
    for n in range(1, r.size + 1):
        lo = max(0, n - window)
        if (c[n] - c[lo]) / (n - lo) <= eps:
            return n, False
    return r.size, True


def regret_bound_rhs(d_terms, beta: float, N: int, delta: float, rms_gaps: Sequence[float],
                     variances: Sequence[float], m_bar: float) -> float:
    """Order-level regret bound with unit constants.

    ``d_terms`` is ``(d_a, d_b)``: the complexity multiplying ``beta`` and
    the one under the square root.  A scalar uses the same value for both.
    """
    d_a, d_b = (d_terms, d_terms) if np.isscalar(d_terms) else d_terms
    iota = math.log(N / delta) * math.log(m_bar)
    s = float(np.sum(np.square(rms_gaps)) + np.sum(variances))
    return iota * (d_a * beta + math.sqrt(d_b * beta * s))


def lambda_total_complexity(lam: float, N: int, m_per_episode) -> float:
    if not 0 <= lam <= 1:
        raise ValueError("lambda must lie in [0, 1]")
    m = np.broadcast_to(np.asarray(m_per_episode, dtype=float), (N,))
    return (1.0 - lam) * N + lam * float(m.sum())


@dataclass
class ComplexityInputs:
    d: float
    eps: float
    var_pi: float
    T: float
    gap: float
    lam: float = 0.0
    N: Optional[int] = None
    m_bar: Optional[float] = None
    rms_gaps: list = field(default_factory=list)

    def __post_init__(self):
        if not 0 <= self.lam <= 1:
            raise ValueError("lambda must lie in [0, 1]")
        for name in ("d", "eps", "T", "gap"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.var_pi < 0:
            raise ValueError("var_pi must be non-negative")


def complexity_terms(inp: ComplexityInputs) -> dict:
    d2, e, lam = inp.d**2, inp.eps, inp.lam
    episodic = d2 / e + d2 * inp.var_pi / e**2
    return {
        "episode": (1 - lam) * episodic,
        "measurement": lam * d2 * inp.T**2 / e**2,
        "gap_penalty": (1 - lam) * d2 * inp.T * inp.gap / e**2,
        "measurement_per_episode": episodic * lam * inp.T / inp.gap,
    }


def eval_complexity_bound(inp: ComplexityInputs) -> float:
    t = complexity_terms(inp)
    return t["episode"] + t["measurement"] + t["gap_penalty"] + t["measurement_per_episode"]


def lambda0_gap(var_pi: float, T: float) -> float:
    """Gap that balances the variance and gap terms when only episodes count."""
    return var_pi / T


def lambda1_gap(T: float) -> float:
    return T


def lambda0_order(d: float, eps: float, var_pi: float, T: float, gap: float) -> float:
    """Order of the episode complexity: the gap only matters once ``T gap`` exceeds ``var_pi``."""
    return d**2 / eps + d**2 * max(var_pi, T * gap) / eps**2


def eluder_estimate(psi_values, eps: float) -> int:
    """Greedy lower bound on the p=1 eluder length of the rows of ``psi_values``.

    A step appends a grid point ``y`` for which some row still has prefix
    sum at most ``eps`` and ``|psi(y)| > eps``.  Among admissible points the
    one that disqualifies the fewest other rows is taken, ties by index.
    """
    psi = np.abs(np.atleast_2d(np.asarray(psi_values, dtype=float)))
    if psi.size == 0 or psi.shape[1] == 0:
        raise ValueError("empty grid")
    if not eps > 0:
        raise ValueError("eps must be positive")
    sums = np.zeros(psi.shape[0])
    length = 0
    while True:
        alive = sums <= eps
        cand = (psi > eps) & alive[:, None]
        points = np.flatnonzero(cand.any(axis=0))
        if points.size == 0:
            return length
        after = sums[:, None] + psi[:, points]
        lost = ((after > eps) & alive[:, None]).sum(axis=0)
        j = points[int(np.argmin(lost))]
        sums += psi[:, j]
        length += 1


@dataclass
class DecompositionReport:
    """Per-gap terms with standard errors and the telescoping residual."""

    I0: float
    I0_se: float
    I1: np.ndarray
    I2: np.ndarray
    I3: np.ndarray
    I4: np.ndarray
    I1_se: np.ndarray
    I2_se: np.ndarray
    I3_se: np.ndarray
    I4_se: np.ndarray
    value_gap: float
    residual: float
    residual_se: float

    @property
    def total(self) -> float:
        return self.I0 + float(np.sum(self.I1 + self.I2 + self.I3 + self.I4))


def _se(x: np.ndarray) -> float:
    return float(x.std(ddof=1) / math.sqrt(x.size)) if x.size > 1 else 0.0


def _split_rollout(first: SdeModel, second: SdeModel, policy: Policy, reward: RewardSpec, x,
                   seg: float, rest: float, sim_step: float, n: int, rng: RngStream):
    """Reward over ``[0, seg]`` under ``first`` and over the following ``rest`` under ``second``."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    g = rng.generator()
    s1 = time_steps(seg, min(sim_step, seg))
    z1 = g.standard_normal((len(s1), n, x.size))
    xe, r1, _ = rollout([(policy, first)], x, s1, z1, reward=reward)
    if rest <= 1e-12:
        return r1[0], np.zeros(n)
    s2 = time_steps(rest, min(sim_step, rest))
    z2 = g.standard_normal((len(s2), n, x.size))
    _, r2, _ = rollout([(policy, second)], xe[0], s2, z2, reward=reward)
    return r1[0], r2[0]


def simulation_decomposition(record: EpisodeRecord, optimistic: SdeModel, true_model: SdeModel,
                             policy: Policy, reward: RewardSpec, budget: int, rng: RngStream,
                             x_ini=None, sim_step: Optional[float] = None) -> DecompositionReport:
    """Monte Carlo estimate of the episode value-gap decomposition.

    Nested expectations ``E_{x ~ p(x_k, gap)} V_n(x, t_{k+1})`` are estimated
    without nesting by simulating the first segment under one model and the
    remainder under the optimistic model.  The optimistic and true
    segments share noise, so identical models give identical estimates.
    """
    traj: Trajectory = record.trajectory
    if traj is None:
        raise ValueError("the episode record does not hold its trajectory")
    T = reward.horizon
    h = sim_step or T / 256
    times = record.schedule.times
    idx = [traj.index_of(t) for t in times]
    xs = traj.states[idx]
    x0 = traj.states[0] if x_ini is None else np.atleast_1d(x_ini)
    b = reward.rate(traj.states, policy(traj.states))
    seg_real = np.array([trapezoid(b[i:j + 1], traj.times[i:j + 1]) for i, j in zip(idx[:-1], idx[1:])])
    realized = float(trapezoid(b, traj.times))

    def value(model, x, s, key):
        rem = T - s
        if rem <= 1e-12:
            return np.zeros(budget)
        _, _, smp = value_table([(policy, model)], reward, x, rem, budget, h, rng.child(*key))
        return smp[0]

    vn0 = value(optimistic, x0, 0.0, ("vn0",))
    vs0 = value(true_model, x0, 0.0, ("vstar0",))
    m = record.schedule.m
    out = {k: np.zeros(m) for k in ("I1", "I2", "I3", "I4", "I1_se", "I2_se", "I3_se", "I4_se")}
    resid_terms = [vn0.mean()]
    resid_var = [_se(vn0) ** 2]
    for k in range(m):
        tk, tk1 = times[k], times[k + 1]
        gap, rest = tk1 - tk, T - tk1
        key = rng.child("gap", k)
        c_seg, a_rest = _split_rollout(true_model, optimistic, policy, reward, xs[k], gap, rest, h, budget, key)
        d_seg, b_rest = _split_rollout(optimistic, optimistic, policy, reward, xs[k], gap, rest, h, budget, key)
        v_next = value(optimistic, xs[k + 1], tk1, ("next", k))
        out["I1"][k] = a_rest.mean() - v_next.mean()
        out["I1_se"][k] = math.hypot(_se(a_rest), _se(v_next))
        out["I2"][k] = c_seg.mean() - seg_real[k]
        out["I2_se"][k] = _se(c_seg)
        out["I3"][k] = b_rest.mean() - a_rest.mean()
        out["I3_se"][k] = _se(b_rest - a_rest)
        out["I4"][k] = d_seg.mean() - c_seg.mean()
        out["I4_se"][k] = _se(d_seg - c_seg)
        # sum of I-terms telescopes to V_n(x_k, t_k) estimates minus V_n(x_{k+1}) estimates
        resid_terms.append(-(b_rest + d_seg).mean())
        resid_var.append(_se(b_rest + d_seg) ** 2)
        resid_terms.append(v_next.mean())
        resid_var.append(_se(v_next) ** 2)
    I0 = realized - vs0.mean()
    value_gap = float(vn0.mean() - vs0.mean())
    rep = DecompositionReport(float(I0), _se(vs0), out["I1"], out["I2"], out["I3"], out["I4"],
                              out["I1_se"], out["I2_se"], out["I3_se"], out["I4_se"], value_gap, 0.0, 0.0)
    rep.residual = abs(value_gap - rep.total)
    rep.residual_se = math.sqrt(sum(resid_var))
    return rep


def var_square_property(samples, tol: float = 1e-12):
    """Empirical variances of ``X`` and ``X^2`` and whether ``Var(X^2) <= 4 Var(X)``."""
    x = np.asarray(samples, dtype=float).ravel()
    if x.size == 0:
        raise ValueError("no samples")
    if np.any(x < 0) or np.any(x > 1):
        raise ValueError("samples must lie in [0, 1]")
    var_x = float(np.var(x))
    var_x2 = float(np.var(x * x))
    return var_x, var_x2, bool(var_x2 <= 4.0 * var_x + tol)


@dataclass
class BellmanCheck:
    x: np.ndarray
    s: float
    gap: float
    lhs: float
    rhs: float
    lhs_se: float
    rhs_se: float

    @property
    def combined_se(self) -> float:
        return math.hypot(self.lhs_se, self.rhs_se)

    @property
    def passed(self) -> bool:
        return abs(self.lhs - self.rhs) <= 3.0 * self.combined_se + 1e-12


def bellman_check(model: SdeModel, policy: Policy, reward: RewardSpec, x, s: float, gap: float,
                  n_rollouts: int, sim_step: float, rng: RngStream) -> BellmanCheck:
    """Compare ``V(x, s)`` with ``E V(x', s + gap) + E int_0^gap b`` by Monte Carlo.

    The left side uses full paths from ``x``.  On the right, ``x'`` is drawn
    from the transition kernel (closed form for linear pairs, simulation
    otherwise) and continued by one fresh path each; the running reward
    uses separate short paths.  All three use independent streams.
    """
    T = reward.horizon
    if not (0 <= s < T and 0 < gap <= T - s + 1e-12):
        raise ValueError("need 0 <= s < T and 0 < gap <= T - s")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    _, _, lhs = value_table([(policy, model)], reward, x, T - s, n_rollouts, sim_step, rng.child("lhs"))
    lhs = lhs[0]
    _, _, run = value_table([(policy, model)], reward, x, gap, n_rollouts, sim_step, rng.child("running"))
    run = run[0]
    rest = T - s - gap
    if rest <= 1e-12:
        cont = np.zeros(n_rollouts)
    else:
        kernel = kernel_for(model, policy)
        g = rng.child("next").generator()
        if kernel.mode == "closed_form_linear":
            gt = transition(kernel, x, gap)
            L = np.linalg.cholesky(gt.covariance)
            xn = gt.mean + g.standard_normal((n_rollouts, x.size)) @ L.T
        else:
            st = time_steps(gap, min(sim_step, gap))
            z = g.standard_normal((len(st), n_rollouts, x.size))
            xn = rollout([(policy, model)], x, st, z)[0][0]
        st = time_steps(rest, min(sim_step, rest))
        z = rng.child("continue").generator().standard_normal((len(st), n_rollouts, x.size))
        _, cont, _ = rollout([(policy, model)], xn, st, z, reward=reward)
        cont = cont[0]
    return BellmanCheck(x, float(s), float(gap), float(lhs.mean()), float(cont.mean() + run.mean()),
                        _se(lhs), math.hypot(_se(cont), _se(run)))
