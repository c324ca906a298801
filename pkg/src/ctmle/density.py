"""Transition densities and Hellinger divergences.

Two kernel modes are provided for a (model, policy) pair:

* ``closed_form_linear``: exact mean and covariance of a linear SDE under an
  unclipped linear feedback policy.
* ``euler_gaussian``: Gaussian with mean given by the RK4 drift flow and
  covariance ``g g^T (x_from) * gap``.

The quadratic density family ``p(y) = (phi^T mu(y))^2`` and its linear-form
Hellinger distance live here as well.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.integrate import quad, simpson
from scipy.linalg import expm
from numpy.polynomial import hermite_e

from .sde_core import Policy, SdeModel

__all__ = [
    "SIGMA_FLOOR",
    "HellingerClampWarning",
    "GaussianTransition",
    "TransitionKernel",
    "transition",
    "transition_batch",
    "log_density",
    "log_density_batch",
    "hellinger_sq_gaussian",
    "numerical_hellinger",
    "QuadraticDensityFamily",
    "quadratic_density_eval",
    "hellinger_sq_quadratic",
    "rotation_fixture",
    "rotation",
    "split_fixture",
    "ou_spectral_density",
]

SIGMA_FLOOR = 1e-6
_LOG_2PI = math.log(2.0 * math.pi)


class HellingerClampWarning(UserWarning):
    pass


def _floor_cov(cov: np.ndarray) -> np.ndarray:
    cov = 0.5 * (cov + cov.T)
    w, v = np.linalg.eigh(cov)
    if w.min() >= SIGMA_FLOOR**2:
        return cov
    w = np.maximum(w, SIGMA_FLOOR**2)
    cov = (v * w) @ v.T
    return 0.5 * (cov + cov.T)


@dataclass(frozen=True, eq=False)
class GaussianTransition:
    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.covariance, dtype=float))
        if cov.shape != (mean.size, mean.size):
            raise ValueError("covariance shape does not match mean")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", _floor_cov(cov))


@dataclass(frozen=True, eq=False)
class TransitionKernel:
    model: SdeModel
    policy: Policy
    mode: str = "closed_form_linear"
    substeps: int = 16

    def __post_init__(self):
        if self.mode not in ("closed_form_linear", "euler_gaussian"):
            raise ValueError(f"unknown kernel mode {self.mode!r}")
        if self.mode == "closed_form_linear":
            if self.model.kind != "linear_gaussian":
                raise ValueError("closed_form_linear needs a linear_gaussian model")
            if not self.policy.is_linear:
                raise ValueError("closed_form_linear needs an unclipped linear policy")
        if self.substeps < 16:
            raise ValueError("euler_gaussian uses at least 16 RK4 substeps")


def _closed_loop(kernel: TransitionKernel):
    m = kernel.model
    A = m.A - m.B @ kernel.policy.gain
    return A, m.c, m.G @ m.G.T


def _linear_moments(A, c, Q, gap):
    """Mean map (Phi, shift) and covariance of dx = (A x + c) dt + G dw over ``gap``."""
    l = A.shape[0]
    aug = np.zeros((l + 1, l + 1))
    aug[:l, :l] = A
    aug[:l, l] = c
    E = expm(aug * gap)
    Phi, shift = E[:l, :l], E[:l, l]
    # Van Loan: expm([[-A, Q], [0, A^T]] gap) = [[., F12], [0, F22]], cov = F22^T F12
    vl = np.zeros((2 * l, 2 * l))
    vl[:l, :l] = -A
    vl[:l, l:] = Q
    vl[l:, l:] = A.T
    F = expm(vl * gap)
    cov = F[l:, l:].T @ F[:l, l:]
    return Phi, shift, 0.5 * (cov + cov.T)


def _scalar_moments(a, c, q, x, gap):
    """Scalar closed-loop OU moments, vectorised over any broadcastable inputs."""
    a, c, q, x, gap = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (a, c, q, x, gap)))
    ag = a * gap
    small = np.abs(ag) < 1e-8
    safe_a = np.where(small, 1.0, a)
    e1 = np.where(small, gap * (1 + ag / 2), np.expm1(ag) / safe_a)
    e2 = np.where(small, gap * (1 + ag), np.expm1(2 * ag) / (2 * safe_a))
    mean = x * np.exp(ag) + c * e1
    var = q * e2
    return mean, np.maximum(var, SIGMA_FLOOR**2)


def _rk4_flow(kernel: TransitionKernel, x: np.ndarray, gap: float) -> np.ndarray:
    f, pol = kernel.model.drift, kernel.policy

    def rhs(y):
        return f(y, pol(y))

    h = gap / kernel.substeps
    y = np.array(x, dtype=float)
    for _ in range(kernel.substeps):
        k1 = rhs(y)
        k2 = rhs(y + 0.5 * h * k1)
        k3 = rhs(y + 0.5 * h * k2)
        k4 = rhs(y + h * k3)
        y = y + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return y


def transition(kernel: TransitionKernel, x_from, gap: float) -> GaussianTransition:
    """Gaussian law of ``x(gap)`` started at ``x_from`` under the kernel's pair."""
    if not gap > 0:
        raise ValueError("gap must be positive")
    x = np.atleast_1d(np.asarray(x_from, dtype=float))
    if kernel.mode == "closed_form_linear":
        A, c, Q = _closed_loop(kernel)
        Phi, shift, cov = _linear_moments(A, c, Q, gap)
        return GaussianTransition(Phi @ x + shift, cov)
    mean = _rk4_flow(kernel, x[None, :], gap)[0]
    g = np.asarray(kernel.model.diffusion(x[None, :], kernel.policy(x[None, :])))[0]
    return GaussianTransition(mean, g @ g.T * gap)


def transition_batch(kernel: TransitionKernel, x_from: np.ndarray, gaps: np.ndarray):
    """Means (n, l) and covariances (n, l, l) for many starting points at once."""
    x = np.asarray(x_from, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    gaps = np.broadcast_to(np.asarray(gaps, dtype=float), x.shape[:1])
    if np.any(gaps <= 0):
        raise ValueError("gap must be positive")
    n, l = x.shape
    if kernel.mode == "closed_form_linear":
        A, c, Q = _closed_loop(kernel)
        if l == 1:
            mean, var = _scalar_moments(A[0, 0], c[0], Q[0, 0], x[:, 0], gaps)
            return mean[:, None], var[:, None, None]
        means = np.empty((n, l))
        covs = np.empty((n, l, l))
        for gap in np.unique(gaps):
            idx = gaps == gap
            Phi, shift, cov = _linear_moments(A, c, Q, gap)
            means[idx] = x[idx] @ Phi.T + shift
            covs[idx] = _floor_cov(cov)
        return means, covs
    h = (gaps / kernel.substeps)[:, None]
    f, pol = kernel.model.drift, kernel.policy
    y = x.copy()
    for _ in range(kernel.substeps):
        k1 = f(y, pol(y))
        k2 = f(y + 0.5 * h * k1, pol(y + 0.5 * h * k1))
        k3 = f(y + 0.5 * h * k2, pol(y + 0.5 * h * k2))
        k4 = f(y + h * k3, pol(y + h * k3))
        y = y + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    g = np.asarray(kernel.model.diffusion(x, pol(x)))
    covs = np.einsum("nij,nkj->nik", g, g) * gaps[:, None, None]
    floor = SIGMA_FLOOR**2 * np.eye(l)
    covs = np.where(np.linalg.eigvalsh(covs).min(axis=-1)[:, None, None] < SIGMA_FLOOR**2,
                    covs + floor, covs)
    return y, covs


def log_density(gt: GaussianTransition, x_to) -> float:
    x = np.atleast_1d(np.asarray(x_to, dtype=float))
    d = x - gt.mean
    L = np.linalg.cholesky(gt.covariance)
    z = np.linalg.solve(L, d)
    return float(-0.5 * (d.size * _LOG_2PI + z @ z) - np.log(np.diag(L)).sum())


def log_density_batch(means: np.ndarray, covs: np.ndarray, x_to: np.ndarray) -> np.ndarray:
    """Row-wise Gaussian log-densities; shapes (n, l), (n, l, l), (n, l)."""
    x = np.asarray(x_to, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    d = x - means
    l = d.shape[1]
    if l == 1:
        v = covs[:, 0, 0]
        return -0.5 * (_LOG_2PI + np.log(v) + d[:, 0] ** 2 / v)
    L = np.linalg.cholesky(covs)
    z = np.linalg.solve(L, d[..., None])[..., 0]
    logdet = 2 * np.log(np.diagonal(L, axis1=-2, axis2=-1)).sum(-1)
    return -0.5 * (l * _LOG_2PI + logdet + (z * z).sum(-1))


def _clamp_unit(value: float, tol: float = 1e-9) -> float:
    clamped = min(max(value, 0.0), 1.0)
    if abs(clamped - value) > tol:
        warnings.warn(f"Hellinger value {value:.3g} clamped into [0, 1]", HellingerClampWarning)
    return clamped


def hellinger_sq_gaussian(p: GaussianTransition, q: GaussianTransition) -> float:
    S1, S2 = p.covariance, q.covariance
    Sbar = 0.5 * (S1 + S2)
    d = p.mean - q.mean
    _, ld1 = np.linalg.slogdet(S1)
    _, ld2 = np.linalg.slogdet(S2)
    _, ldb = np.linalg.slogdet(Sbar)
    log_bc = 0.25 * (ld1 + ld2) - 0.5 * ldb - 0.125 * d @ np.linalg.solve(Sbar, d)
    # 1 - exp(x) through expm1 keeps tiny distances accurate
    return _clamp_unit(float(-np.expm1(min(log_bc, 0.0))))


def numerical_hellinger(dens_a: Callable, dens_b: Callable, support, n_points: int = 2049) -> float:
    """``1 - integral of sqrt(a b)`` by composite Simpson on a uniform grid."""
    if n_points < 128:
        raise ValueError("n_points must be at least 128")
    lo, hi = support
    y = np.linspace(lo, hi, n_points)
    a = np.asarray(dens_a(y), dtype=float)
    b = np.asarray(dens_b(y), dtype=float)
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("density not finite on the support")
    if np.any(a < 0) or np.any(b < 0):
        raise ValueError("negative density sample")
    return min(max(1.0 - float(simpson(np.sqrt(a * b), x=y)), 0.0), 1.0)


@dataclass(eq=False)
class QuadraticDensityFamily:
    """Densities ``p_j(y | u, x, t) = (phi(u, x, t)^T mu_j(y))^2`` on a bounded support.

    ``component_maps[j]`` maps an array of ``y`` to an array (..., d).  Gram
    matrices ``int mu_a mu_b^T dy`` are computed lazily by Simpson quadrature
    on ``n_quad`` points and cached.
    """

    feature: Callable
    component_maps: Sequence[Callable]
    energy_bound: float
    support: tuple = (-8.0, 8.0)
    n_quad: int = 4097
    _grams: dict = field(default_factory=dict, repr=False)

    @property
    def dim(self) -> int:
        return int(np.asarray(self.component_maps[0](np.zeros(1))).shape[-1])

    def __len__(self) -> int:
        return len(self.component_maps)

    def grid(self) -> np.ndarray:
        return np.linspace(self.support[0], self.support[1], self.n_quad)

    def gram(self, a: int, b: int) -> np.ndarray:
        key = (a, b)
        if key not in self._grams:
            y = self.grid()
            ma = np.asarray(self.component_maps[a](y))
            mb = np.asarray(self.component_maps[b](y))
            G = simpson(ma[:, :, None] * mb[:, None, :], x=y, axis=0)
            self._grams[key] = G
            self._grams[(b, a)] = G.T
        return self._grams[key]

    def energy(self, j: int) -> float:
        return float(np.trace(self.gram(j, j)))

    def density(self, j: int, u, x, t) -> Callable:
        phi = np.asarray(self.feature(u, x, t), dtype=float)
        mu = self.component_maps[j]
        return lambda y: (np.asarray(mu(np.asarray(y, dtype=float))) @ phi) ** 2


def quadratic_density_eval(fam: QuadraticDensityFamily, model_index: int, u, x, t, y):
    lo, hi = fam.support
    y_arr = np.asarray(y, dtype=float)
    if np.any(y_arr < lo) or np.any(y_arr > hi):
        raise ValueError("y outside the family support")
    return fam.density(model_index, u, x, t)(y_arr)


def hellinger_sq_quadratic(fam: QuadraticDensityFamily, model_a: int, model_b: int, u, x, t) -> float:
    """Linear-form value ``1 - phi^T (int mu_a mu_b^T) phi``.

    This equals the squared Hellinger distance whenever ``phi^T mu_a`` and
    ``phi^T mu_b`` share a sign everywhere; otherwise it is an upper bound.
    """
    phi = np.asarray(fam.feature(u, x, t), dtype=float)
    return _clamp_unit(1.0 - float(phi @ fam.gram(model_a, model_b) @ phi), tol=1e-6)


def rotation(s: float) -> np.ndarray:
    c, n = math.cos(s), math.sin(s)
    return np.array([[c, -n], [n, c]])


_C1 = (2.0 / math.pi) ** 0.25
_C2 = 2.0 * (2.0 / math.pi) ** 0.25


def _base_mu(y):
    y = np.asarray(y, dtype=float)
    e = np.exp(-y * y)
    return np.stack([_C1 * e, _C2 * y * e], axis=-1)


def _circle_feature(u, x, t):
    return np.array([math.cos(t), math.sin(t)])


def rotation_fixture(shifts: Sequence[float] = (0.0,), n_quad: int = 4097) -> QuadraticDensityFamily:
    """Two-component Gaussian/Hermite family with ``phi(t) = (cos t, sin t)``.

    Model ``j`` uses ``mu_j = R(s_j)^T mu`` so its density at time ``t`` is the
    base density at ``t + s_j``.  The base components are orthonormal, hence
    every Gram is a rotation and every member integrates to one.
    """
    maps = []
    for s in shifts:
        R = rotation(float(s))
        maps.append(lambda y, R=R: _base_mu(y) @ R)
    return QuadraticDensityFamily(_circle_feature, maps, energy_bound=2.0, support=(-8.0, 8.0),
                                  n_quad=n_quad)


def _split_feature(u, x, t):
    th = 0.25 * math.pi * (1.0 + math.sin(t))
    return np.array([math.cos(th), math.sin(th)])


def split_fixture(params: Sequence[tuple], n_quad: int = 8193) -> QuadraticDensityFamily:
    """Family whose two components live on the two half lines.

    ``params`` holds ``(m_left, s_left, m_right, s_right)`` per model.  Each
    component is nonnegative, so ``phi^T mu`` never changes sign and the
    linear Hellinger form is exact.  The feature stays in the positive
    quadrant of the unit circle.
    """
    def bump(y, m, s, side):
        core = y * y * np.exp(-((y - m) ** 2) / (4.0 * s * s))
        return np.where(side * y > 0, core, 0.0)

    maps = []
    for m_l, s_l, m_r, s_r in params:
        zl = math.sqrt(quad(lambda y: bump(y, m_l, s_l, -1) ** 2, -np.inf, 0.0,
                            epsabs=0, epsrel=1e-13, limit=200)[0])
        zr = math.sqrt(quad(lambda y: bump(y, m_r, s_r, 1) ** 2, 0.0, np.inf,
                            epsabs=0, epsrel=1e-13, limit=200)[0])

        def mu(y, m_l=m_l, s_l=s_l, m_r=m_r, s_r=s_r, zl=zl, zr=zr):
            y = np.asarray(y, dtype=float)
            return np.stack([bump(y, m_l, s_l, -1) / zl, bump(y, m_r, s_r, 1) / zr], axis=-1)

        maps.append(mu)
    return QuadraticDensityFamily(_split_feature, maps, energy_bound=2.0, support=(-12.0, 12.0),
                                  n_quad=n_quad)


def ou_spectral_density(y, y0: float, t: float, gamma: float, sigma: float, n_terms: int = 8):
    """Truncated Mehler series for the OU transition ``dx = -gamma x dt + sigma dw``.

    Uses probabilists' Hermite polynomials around the stationary law
    ``N(0, sigma^2 / (2 gamma))``.  Accurate once ``exp(-gamma t)`` is small
    enough for the first ``n_terms`` modes to dominate.
    """
    if gamma <= 0 or sigma <= 0:
        raise ValueError("gamma and sigma must be positive")
    s = sigma / math.sqrt(2.0 * gamma)
    z = np.asarray(y, dtype=float) / s
    z0 = y0 / s
    total = np.zeros_like(z)
    for n in range(n_terms):
        c = np.zeros(n + 1)
        c[n] = 1.0
        total = total + math.exp(-n * gamma * t) * hermite_e.hermeval(z, c) * hermite_e.hermeval(z0, c) / math.factorial(n)
    return np.exp(-0.5 * z * z) / (s * math.sqrt(2 * math.pi)) * total
