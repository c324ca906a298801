"""Itô SDE environments and Euler-Maruyama simulation.

States are 1-d arrays of length ``l``; controls are 1-d arrays of length
``r``.  Every callable attached to a model, policy or reward must be
vectorised over leading batch axes, e.g. ``drift(x[..., l], u[..., r])``
returns ``[..., l]`` and ``diffusion`` returns ``[..., l, l]``.

All randomness enters through :class:`RngStream`, so a fixed
``(seed, stream_key)`` reproduces a path bit for bit.
"""

from __future__ import annotations

import math
import warnings
import zlib
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "RngStream",
    "SdeModel",
    "Policy",
    "RewardSpec",
    "Trajectory",
    "SimulationError",
    "RewardClampWarning",
    "linear_model",
    "linear_policy",
    "time_steps",
    "rollout",
    "simulate_trajectory",
    "sample_marginal",
    "integrate_reward",
]


class SimulationError(RuntimeError):
    """Raised when an integration step produces a non-finite state."""

    def __init__(self, message: str, time: float):
        super().__init__(f"{message} (first non-finite state at t={time:.6g})")
        self.time = time


class RewardClampWarning(UserWarning):
    pass


def _key_part(part) -> int:
    if isinstance(part, (bool, np.bool_)):
        return int(part)
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError("stream key integers must be non-negative")
        return int(part)
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    raise TypeError(f"unsupported stream key component {part!r}")


@dataclass(frozen=True)
class RngStream:
    """Counter-based random stream identified by ``(seed, stream_key)``.

    The key is usually ``(episode, purpose, replicate)``; any mix of
    non-negative ints and strings is accepted.  Streams with distinct keys
    are derived through ``numpy.random.SeedSequence`` spawn keys and drive a
    Philox generator, so draws do not depend on the order in which streams
    are consumed.
    """

    seed: int
    stream_key: tuple = ()

    def child(self, *key) -> "RngStream":
        return RngStream(self.seed, self.stream_key + tuple(key))

    def generator(self) -> np.random.Generator:
        spawn_key = tuple(_key_part(k) for k in self.stream_key)
        ss = np.random.SeedSequence(int(self.seed) & (2**64 - 1), spawn_key=spawn_key)
        return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True, eq=False)
class SdeModel:
    """A drift-diffusion pair ``(f, g)``.

    For ``kind == "linear_gaussian"`` the matrices ``A, B, c, G`` describe
    ``dx = (A x + B u + c) dt + G dw`` and are used by closed-form kernels
    and by the stacked fast path of :func:`rollout`.
    """

    drift: Callable[[np.ndarray, np.ndarray], np.ndarray]
    diffusion: Callable[[np.ndarray, np.ndarray], np.ndarray]
    id: int = 0
    kind: str = "generic"
    state_dim: int = 1
    control_dim: int = 1
    A: Optional[np.ndarray] = None
    B: Optional[np.ndarray] = None
    c: Optional[np.ndarray] = None
    G: Optional[np.ndarray] = None
    label: str = ""
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("linear_gaussian", "generic"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.kind == "linear_gaussian" and any(
            m is None for m in (self.A, self.B, self.c, self.G)
        ):
            raise ValueError("linear_gaussian models need A, B, c and G")

    def with_id(self, new_id: int) -> "SdeModel":
        return SdeModel(
            self.drift, self.diffusion, new_id, self.kind, self.state_dim,
            self.control_dim, self.A, self.B, self.c, self.G, self.label, dict(self.params),
        )


def linear_model(A, B, G, c=None, id: int = 0, label: str = "", params=None) -> SdeModel:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    G = np.atleast_2d(np.asarray(G, dtype=float))
    l, r = B.shape
    c = np.zeros(l) if c is None else np.asarray(c, dtype=float).reshape(l)
    if A.shape != (l, l) or G.shape != (l, l):
        raise ValueError("A and G must be l x l, B must be l x r")

    def drift(x, u):
        return x @ A.T + u @ B.T + c

    def diffusion(x, u):
        return np.broadcast_to(G, x.shape[:-1] + (l, l))

    return SdeModel(drift, diffusion, id, "linear_gaussian", l, r, A, B, c, G, label,
                    dict(params or {}))


@dataclass(frozen=True, eq=False)
class Policy:
    """Deterministic state-feedback policy.

    ``gain`` (r x l) marks a linear policy ``u = -gain @ x``, optionally
    clipped to ``[-clip, clip]``; generic policies leave it as ``None``.
    """

    map: Callable[[np.ndarray], np.ndarray]
    id: int = 0
    lipschitz_hint: Optional[float] = None
    gain: Optional[np.ndarray] = None
    clip: Optional[float] = None
    label: str = ""

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.map(x)

    @property
    def is_linear(self) -> bool:
        return self.gain is not None and self.clip is None


def linear_policy(gain, id: int = 0, clip: Optional[float] = None, label: str = "") -> Policy:
    K = np.atleast_2d(np.asarray(gain, dtype=float))
    if clip is None:
        def fn(x):
            return -(x @ K.T)
    else:
        def fn(x):
            return np.clip(-(x @ K.T), -clip, clip)
    return Policy(fn, id, float(np.linalg.norm(K, 2)), K, clip, label)


@dataclass(frozen=True, eq=False)
class RewardSpec:
    """Reward rate ``b(x, u)`` with values in ``[0, 1/T]`` and its horizon."""

    rate: Callable[[np.ndarray, np.ndarray], np.ndarray]
    horizon: float
    lipschitz_hint: Optional[float] = None

    def __post_init__(self):
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")


@dataclass(frozen=True, eq=False)
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    sim_step: float

    def __post_init__(self):
        if len(self.times) != len(self.states):
            raise ValueError("times and states differ in length")
        if self.times[0] != 0.0 or np.any(np.diff(self.times) <= 0):
            raise ValueError("times must start at 0 and strictly increase")

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    def index_of(self, t: float) -> int:
        """Index of the grid point nearest to ``t``."""
        i = int(np.searchsorted(self.times, t))
        if i == 0:
            return 0
        if i >= len(self.times):
            return len(self.times) - 1
        return i if self.times[i] - t < t - self.times[i - 1] else i - 1


def time_steps(duration: float, sim_step: float) -> np.ndarray:
    """Uniform step sizes covering ``[0, duration]``; the last step is truncated."""
    if duration < 0:
        raise ValueError("duration must be non-negative")
    if not sim_step > 0:
        raise ValueError("sim_step must be positive")
    if duration == 0:
        return np.zeros(0)
    n = max(1, math.ceil(duration / sim_step - 1e-9))
    h = np.full(n, float(sim_step))
    h[-1] = duration - (n - 1) * sim_step
    if h[-1] <= 0:
        h = h[:-1]
        h[-1] += duration - h.sum()
    return h


@dataclass
class _Stacked:
    A: np.ndarray  # (P, l, l)
    B: np.ndarray  # (P, l, r)
    c: np.ndarray  # (P, l)
    G: np.ndarray  # (P, l, l)
    K: np.ndarray  # (P, r, l)
    clip: np.ndarray  # (P,)


def _stack_linear(pairs) -> Optional[_Stacked]:
    if not all(m.kind == "linear_gaussian" and p.gain is not None for p, m in pairs):
        return None
    return _Stacked(
        np.stack([m.A for _, m in pairs]),
        np.stack([m.B for _, m in pairs]),
        np.stack([m.c for _, m in pairs]),
        np.stack([m.G for _, m in pairs]),
        np.stack([p.gain for p, _ in pairs]),
        np.array([np.inf if p.clip is None else p.clip for p, _ in pairs]),
    )


def _check_finite(x: np.ndarray, t: float):
    if not np.isfinite(x.sum()):
        raise SimulationError("Euler-Maruyama step diverged", t)


def rollout(
    pairs: Sequence[tuple[Policy, SdeModel]],
    x0: np.ndarray,
    steps: np.ndarray,
    normals: np.ndarray,
    reward: Optional[RewardSpec] = None,
    record: bool = False,
    t0: float = 0.0,
):
    """Euler-Maruyama rollouts of several (policy, model) pairs on shared noise.

    Parameters
    ----------
    pairs : sequence of (Policy, SdeModel)
    x0 : array (l,), (R, l) or (P, R, l)
        Initial states.
    steps : array (n,)
        Step sizes, typically from :func:`time_steps`.
    normals : array (n, R, l)
        Standard normal draws, shared by every pair (common random numbers).
    reward : RewardSpec, optional
        When given, the trapezoidal integral of the rate is accumulated.
    record : bool
        Keep every intermediate state, shape (n + 1, P, R, l).

    Returns
    -------
    final : array (P, R, l)
    integral : array (P, R) or None
    path : array or None
    """
    P = len(pairs)
    n, R, l = normals.shape
    if n != len(steps):
        raise ValueError("normals and steps disagree on the number of steps")
    x = np.broadcast_to(np.asarray(x0, dtype=float), (P, R, l)).copy()
    sqrt_h = np.sqrt(steps)
    stacked = _stack_linear(pairs)
    scalar = stacked is not None and l == 1 and stacked.K.shape[1] == 1
    if scalar:
        a, b, c = stacked.A[:, 0, :1], stacked.B[:, 0, :1], stacked.c[:, :1]
        g, k, lim = stacked.G[:, 0, :1], stacked.K[:, 0, :1], stacked.clip[:, None]
        clipped = bool(np.isfinite(lim).any())
        x = x[..., 0]

        def control(x):
            u = -k * x
            return np.clip(u, -lim, lim) if clipped else u

        def advance(x, u, h, sh, z):
            return x + (a * x + b * u + c) * h + g * (sh * z[..., 0])

        def rate(x, u):
            return reward.rate(x[..., None], u[..., None])
    elif stacked is not None:
        S = stacked

        def control(x):
            u = -np.einsum("prl,pnl->pnr", S.K, x)
            return np.clip(u, -S.clip[:, None, None], S.clip[:, None, None])

        def advance(x, u, h, sh, z):
            f = np.einsum("pij,pnj->pni", S.A, x) + np.einsum("pij,pnj->pni", S.B, u) + S.c[:, None, :]
            return x + f * h + sh * np.einsum("pij,nj->pni", S.G, z)

        def rate(x, u):
            return reward.rate(x, u)
    else:
        def control(x):
            return np.stack([p.map(x[i]) for i, (p, _) in enumerate(pairs)])

        def advance(x, u, h, sh, z):
            out = np.empty_like(x)
            for i, (_, m) in enumerate(pairs):
                g = m.diffusion(x[i], u[i])
                out[i] = x[i] + m.drift(x[i], u[i]) * h + sh * np.einsum("...ij,...j->...i", g, z)
            return out

        def rate(x, u):
            return reward.rate(x, u)

    path = None
    if record:
        path = np.empty((n + 1,) + x.shape)
        path[0] = x
    u = control(x)
    integral = None
    if reward is not None:
        b_prev = rate(x, u)
        integral = np.zeros((P, R))
    t = t0
    for i in range(n):
        x = advance(x, u, steps[i], sqrt_h[i], normals[i])
        t += steps[i]
        _check_finite(x, t)
        u = control(x)
        if reward is not None:
            b_next = rate(x, u)
            integral += 0.5 * steps[i] * (b_prev + b_next)
            b_prev = b_next
        if record:
            path[i + 1] = x
    if scalar:
        x = x[..., None]
        if record:
            path = path[..., None]
    return x, integral, path


def simulate_trajectory(model: SdeModel, policy: Policy, x_ini, horizon: float,
                        sim_step: float, rng: RngStream) -> Trajectory:
    if not (horizon > 0 and sim_step > 0 and sim_step <= horizon):
        raise ValueError("need 0 < sim_step <= horizon")
    x_ini = np.atleast_1d(np.asarray(x_ini, dtype=float))
    steps = time_steps(horizon, sim_step)
    z = rng.generator().standard_normal((len(steps), 1, x_ini.size))
    _, _, path = rollout([(policy, model)], x_ini, steps, z, record=True)
    states = path[:, 0, 0, :]
    times = np.concatenate([[0.0], np.cumsum(steps)])
    times[-1] = horizon
    return Trajectory(times, states, policy(states), float(sim_step))


def sample_marginal(model: SdeModel, policy: Policy, x, elapsed: float, sim_step: float,
                    rng: RngStream) -> np.ndarray:
    """Endpoint of a fresh path of duration ``elapsed`` started at ``x``."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if elapsed < 0:
        raise ValueError("elapsed must be non-negative")
    if elapsed == 0:
        return x.copy()
    steps = time_steps(elapsed, min(sim_step, elapsed))
    z = rng.generator().standard_normal((len(steps), 1, x.size))
    final, _, _ = rollout([(policy, model)], x, steps, z)
    return final[0, 0]


def integrate_reward(traj: Trajectory, reward: RewardSpec, policy: Policy) -> float:
    """Trapezoidal reward integral along ``traj``, clamped into ``[0, 1]``."""
    b = np.asarray(reward.rate(traj.states, policy(traj.states)), dtype=float)
    if not np.all(np.isfinite(b)):
        raise ValueError("reward rate is not finite along the trajectory")
    h = np.diff(traj.times)
    value = float(np.sum(0.5 * h * (b[:-1] + b[1:])))
    clamped = min(max(value, 0.0), 1.0)
    if abs(clamped - value) > 1e-9:
        warnings.warn(f"reward integral {value:.6g} clamped into [0, 1]", RewardClampWarning)
    return clamped
