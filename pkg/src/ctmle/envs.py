"""Preset environments with finite model and policy classes.

Every preset is a pure function of ``(name, sigma, overrides)``.  Model
classes are stored flat as the product of a drift grid and a diffusion grid,
with ``model_id = drift_index * n_diffusion + diffusion_index``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .density import QuadraticDensityFamily, rotation_fixture
from .sde_core import Policy, RewardSpec, SdeModel, linear_model, linear_policy

__all__ = ["EnvironmentPreset", "make_environment", "PRESETS", "G_MIN", "DEFAULTS"]

G_MIN = 0.05

DEFAULTS = {
    "ou_control": {
        "horizon": 1.0,
        "x_ini": 1.0,
        "a_true": 0.0,
        "c": 1.0,
        "a_grid": [-8.0, -4.0, -2.0, 0.0, 2.0],
        "sigma_factors": [0.7, 0.85, 1.0, 1.15, 1.3],
        "gains": [0.0, 1.0, 2.0, 4.0, 8.0],
        "rho": 0.5,
        "rho_u": 3.0,
        "clip": None,
        "g_min": G_MIN,
    },
    "linear_2d": {
        "horizon": 1.0,
        "x_ini": [1.0, -0.5],
        "drift_scale_true": 1.0,
        "drift_scales": [0.0, 0.5, 1.0, 1.5, 2.0],
        "base_A": [[0.0, 1.0], [-1.0, -0.5]],
        "B": [[0.0], [1.0]],
        "sigma_factors": [0.7, 0.85, 1.0, 1.15, 1.3],
        "gains": [[0.0, 0.0], [0.5, 0.5], [1.0, 1.0], [2.0, 1.0], [4.0, 2.0]],
        "rho": 0.75,
        "rho_u": 3.0,
        "g_min": G_MIN,
    },
    "bounded_nonlinear": {
        "horizon": 1.0,
        "x_ini": 1.0,
        "theta_true": 1.0,
        "theta_grid": [-2.0, -1.0, 0.0, 1.0, 2.0],
        "c": 1.0,
        "sigma_factors": [0.7, 0.85, 1.0, 1.15, 1.3],
        "gains": [0.0, 0.5, 1.0, 2.0, 4.0],
        "clip": 1.0,
        "rho": 0.5,
        "g_min": G_MIN,
    },
    "quadratic_fixture": {
        "shifts": [0.0, 0.25, 0.5, 1.0, 2.0],
    },
}


@dataclass(frozen=True, eq=False)
class EnvironmentPreset:
    name: str
    true_model: Optional[SdeModel]
    model_class: tuple
    policy_class: tuple
    reward: Optional[RewardSpec]
    x_ini: np.ndarray
    volatility: float
    known_constants: Optional[dict] = None
    n_drift: int = 1
    n_diffusion: int = 1
    true_index: int = 0
    true_in_class: bool = True
    family: Optional[QuadraticDensityFamily] = None
    params: dict = field(default_factory=dict)

    @property
    def likelihood_exact(self) -> bool:
        """False when the simulated diffusion sits below the class floor ``g_min``."""
        return self.true_in_class

    def model(self, model_id: int) -> SdeModel:
        return self.model_class[model_id]

    def policy(self, policy_id: int) -> Policy:
        return self.policy_class[policy_id]


def _merge(name: str, overrides: Optional[dict]) -> dict:
    p = {k: (list(v) if isinstance(v, list) else v) for k, v in DEFAULTS[name].items()}
    for k, v in (overrides or {}).items():
        if k not in p:
            raise ValueError(f"unknown override {k!r} for preset {name!r}")
        p[k] = v
    return p


def _sigma_grid(sigma: float, factors, g_min: float) -> list:
    ref = max(sigma, g_min)
    return [max(f * ref, g_min) for f in factors]


def _true_position(grid, value) -> int:
    for i, v in enumerate(grid):
        if abs(v - value) <= 1e-12 * max(1.0, abs(value)):
            return i
    raise ValueError(f"true parameter {value} is missing from its grid")


def _gaussian_reward(rho: float, rho_u: Optional[float], T: float) -> RewardSpec:
    inv_u = 0.0 if rho_u is None or math.isinf(rho_u) else 1.0 / (2.0 * rho_u**2)
    inv_x = 1.0 / (2.0 * rho**2)

    def rate(x, u):
        return np.exp(-inv_x * np.sum(x * x, axis=-1) - inv_u * np.sum(u * u, axis=-1)) / T

    # gradient of exp(-q) is bounded by sqrt(2 * coeff) * exp(-1/2)
    lb = max(math.sqrt(2 * inv_x), math.sqrt(2 * inv_u)) * math.exp(-0.5) / T
    return RewardSpec(rate, T, lb)


def _ou_control(sigma, p):
    T = float(p["horizon"])
    c = float(p["c"])
    sig_grid = _sigma_grid(sigma, p["sigma_factors"], p["g_min"])
    a_grid = [float(a) for a in p["a_grid"]]
    ia = _true_position(a_grid, float(p["a_true"]))
    true_in_class = sigma >= p["g_min"]
    ig = _true_position(sig_grid, max(sigma, p["g_min"]))
    models = []
    for i, a in enumerate(a_grid):
        for j, s in enumerate(sig_grid):
            models.append(linear_model([[a]], [[c]], [[s]], id=len(models),
                                       label=f"a={a:g},sigma={s:g}", params={"a": a, "c": c, "sigma": s}))
    true_index = ia * len(sig_grid) + ig
    if true_in_class:
        true_model = models[true_index]
    else:
        a = a_grid[ia]
        true_model = linear_model([[a]], [[c]], [[sigma]], id=true_index, label=f"a={a:g},sigma={sigma:g}",
                                  params={"a": a, "c": c, "sigma": sigma})
    policies = tuple(linear_policy([[k]], id=i, clip=p["clip"], label=f"k={k:g}")
                     for i, k in enumerate(p["gains"]))
    reward = _gaussian_reward(p["rho"], p["rho_u"], T)
    consts = {"L_b": reward.lipschitz_hint, "L_f": max(abs(a_grid[ia]), abs(c)), "G_frob": float(sigma)}
    return EnvironmentPreset("ou_control", true_model, tuple(models), policies, reward,
                             np.array([float(p["x_ini"])]), float(sigma), consts, len(a_grid),
                             len(sig_grid), true_index, true_in_class, params=p)


def _linear_2d(sigma, p):
    T = float(p["horizon"])
    A0 = np.asarray(p["base_A"], dtype=float)
    B = np.asarray(p["B"], dtype=float)
    scales = [float(s) for s in p["drift_scales"]]
    sig_grid = _sigma_grid(sigma, p["sigma_factors"], p["g_min"])
    i_s = _true_position(scales, float(p["drift_scale_true"]))
    true_in_class = sigma >= p["g_min"]
    ig = _true_position(sig_grid, max(sigma, p["g_min"]))
    models = []
    for s in scales:
        for g in sig_grid:
            models.append(linear_model(s * A0, B, g * np.eye(2), id=len(models),
                                       label=f"scale={s:g},sigma={g:g}", params={"scale": s, "sigma": g}))
    true_index = i_s * len(sig_grid) + ig
    true_model = models[true_index] if true_in_class else linear_model(
        scales[i_s] * A0, B, sigma * np.eye(2), id=true_index, params={"scale": scales[i_s], "sigma": sigma})
    policies = tuple(linear_policy(np.asarray(k, dtype=float)[None, :], id=i, label=f"K={k}")
                     for i, k in enumerate(p["gains"]))
    reward = _gaussian_reward(p["rho"], p["rho_u"], T)
    L_f = max(np.linalg.norm(scales[i_s] * A0, 2), np.linalg.norm(B, 2))
    consts = {"L_b": reward.lipschitz_hint, "L_f": float(L_f), "G_frob": float(sigma * math.sqrt(2))}
    return EnvironmentPreset("linear_2d", true_model, tuple(models), policies, reward,
                             np.asarray(p["x_ini"], dtype=float), float(sigma), consts, len(scales),
                             len(sig_grid), true_index, true_in_class, params=p)


def _nonlinear_model(theta, c, s, id, label=""):
    def drift(x, u):
        return theta * np.tanh(x) + c * u

    def diffusion(x, u):
        return np.broadcast_to(np.array([[s]]), x.shape[:-1] + (1, 1))

    return SdeModel(drift, diffusion, id, "generic", 1, 1, label=label,
                    params={"theta": theta, "c": c, "sigma": s})


def _bounded_nonlinear(sigma, p):
    T = float(p["horizon"])
    c = float(p["c"])
    thetas = [float(t) for t in p["theta_grid"]]
    sig_grid = _sigma_grid(sigma, p["sigma_factors"], p["g_min"])
    it = _true_position(thetas, float(p["theta_true"]))
    true_in_class = sigma >= p["g_min"]
    ig = _true_position(sig_grid, max(sigma, p["g_min"]))
    models = []
    for th in thetas:
        for g in sig_grid:
            models.append(_nonlinear_model(th, c, g, len(models), f"theta={th:g},sigma={g:g}"))
    true_index = it * len(sig_grid) + ig
    true_model = models[true_index] if true_in_class else _nonlinear_model(thetas[it], c, sigma, true_index)
    policies = tuple(linear_policy([[k]], id=i, clip=p["clip"], label=f"k={k:g}")
                     for i, k in enumerate(p["gains"]))
    reward = _gaussian_reward(p["rho"], None, T)
    consts = {"L_b": reward.lipschitz_hint, "L_f": max(abs(thetas[it]), abs(c)), "G_frob": float(sigma)}
    return EnvironmentPreset("bounded_nonlinear", true_model, tuple(models), policies, reward,
                             np.array([float(p["x_ini"])]), float(sigma), consts, len(thetas),
                             len(sig_grid), true_index, true_in_class, params=p)


def _quadratic(sigma, p):
    fam = rotation_fixture([float(s) for s in p["shifts"]])
    return EnvironmentPreset("quadratic_fixture", None, (), (), None, np.zeros(0), float(sigma),
                             None, len(fam), 1, 0, True, fam, params=p)


PRESETS = {
    "ou_control": _ou_control,
    "linear_2d": _linear_2d,
    "bounded_nonlinear": _bounded_nonlinear,
    "quadratic_fixture": _quadratic,
}


def make_environment(name: str, sigma: float = 1.0, overrides: Optional[dict] = None) -> EnvironmentPreset:
    """Build the named preset at volatility ``sigma``.

    With ``sigma`` below ``g_min`` the environment is simulated with that
    exact noise level while the likelihood class keeps its floor, so the
    true model is not a class member (``true_in_class`` is False).
    """
    if name not in PRESETS:
        raise ValueError(f"unknown environment {name!r}; choose from {sorted(PRESETS)}")
    if not sigma >= 0:
        raise ValueError("sigma must be non-negative")
    return PRESETS[name](float(sigma), _merge(name, overrides))
