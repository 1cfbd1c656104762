"""Noise schedule and the closed-form pieces of forward and reverse diffusion.

Timesteps are 1-indexed: ``t`` runs over ``1..T`` and index 0 holds the
clean-data convention ``alpha_bar[0] = 1``. The step functions accept either
numpy arrays or :class:`~pidiff.tensor.Tensor` values for the predicted noise;
``t`` may be a single int or one int per batch element.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from ..tensor import Tensor, ops

ArrayLike = Union[np.ndarray, Tensor]

# canonical linear-schedule range for T=1000
BETA_1, BETA_T = 1e-4, 0.02
DESK_T = 100


@dataclass(frozen=True)
class NoiseSchedule:
    T_steps: int
    beta: np.ndarray        # length T+1, beta[0] = 0
    alpha: np.ndarray       # 1 - beta
    alpha_bar: np.ndarray   # cumulative products, alpha_bar[0] = 1

    def check_t(self, t, low: int = 1) -> np.ndarray:
        arr = np.asarray(t)
        if arr.dtype.kind not in "iu":
            if not np.all(arr == np.round(arr)):
                raise ValueError(f"timesteps must be integers, got {t}")
            arr = arr.astype(np.int64)
        if np.any(arr < low) or np.any(arr > self.T_steps):
            raise ValueError(f"timestep {t} outside [{low}, {self.T_steps}]")
        return arr


def build_linear_schedule(T_steps: int, beta_1: float = BETA_1, beta_T: float = BETA_T) -> NoiseSchedule:
    if T_steps < 1:
        raise ValueError("T_steps must be >= 1")
    if not (0.0 < beta_1 <= beta_T < 1.0):
        raise ValueError(f"need 0 < beta_1 <= beta_T < 1, got ({beta_1}, {beta_T})")
    beta = np.concatenate([[0.0], np.linspace(beta_1, beta_T, T_steps)])
    alpha = 1.0 - beta
    return NoiseSchedule(T_steps, beta, alpha, np.cumprod(alpha))


def desk_schedule(T_steps: int = DESK_T) -> NoiseSchedule:
    """Linear schedule with the canonical range stretched by ``1000 / T``.

    This keeps the total noise injected (sum of betas, hence ``alpha_bar[T]``)
    close to the T=1000 reference when fewer steps are used.
    """
    scale = 1000.0 / T_steps
    return build_linear_schedule(T_steps, min(BETA_1 * scale, 0.5), min(BETA_T * scale, 0.999))


def timestep_subsequence(T_steps: int, s: int) -> np.ndarray:
    """``s`` timesteps spread uniformly over [1, T], always including T; ascending."""
    if s < 1:
        raise ValueError("need at least one sampling step")
    if s > T_steps:
        raise ValueError(f"cannot take {s} steps from a {T_steps}-step schedule")
    if s == 1:
        return np.array([T_steps])
    return np.round(np.linspace(1, T_steps, s)).astype(np.int64)


def _per_sample(values: np.ndarray, x: ArrayLike) -> np.ndarray:
    """Reshape scalar-or-per-sample coefficients to broadcast against numpy ``x``."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 0:
        return values
    return values.reshape((-1,) + (1,) * (np.ndim(x.data if isinstance(x, Tensor) else x) - 1))


def _scale(x: ArrayLike, coeff: np.ndarray):
    """coeff * x for numpy or Tensor ``x``; ``coeff`` scalar or one per sample."""
    if isinstance(x, Tensor):
        c = np.asarray(coeff, dtype=np.float64)
        if c.ndim == 0:
            return ops.mul(x, float(c))
        return ops.scale_batch(x, c)
    return _per_sample(coeff, x) * x


def _add(a, b):
    if isinstance(a, Tensor) or isinstance(b, Tensor):
        if not isinstance(a, Tensor):
            a, b = b, a
        return ops.add(a, b if isinstance(b, Tensor) else Tensor(np.asarray(b, dtype=a.dtype)))
    return a + b


def forward_diffuse(z0: np.ndarray, t, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """``sqrt(abar_t) z0 + sqrt(1 - abar_t) eps``."""
    t = sched.check_t(t)
    if np.shape(eps) != np.shape(z0):
        raise ValueError(f"eps shape {np.shape(eps)} != z0 shape {np.shape(z0)}")
    ab = sched.alpha_bar[t]
    return _per_sample(np.sqrt(ab), z0) * z0 + _per_sample(np.sqrt(1.0 - ab), z0) * eps


def forward_step(z_prev: np.ndarray, t: int, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """One Markov step ``sqrt(alpha_t) z_{t-1} + sqrt(1 - alpha_t) eps``."""
    t = sched.check_t(t)
    a = sched.alpha[t]
    return _per_sample(np.sqrt(a), z_prev) * z_prev + _per_sample(np.sqrt(1.0 - a), z_prev) * eps


def q_posterior(z0: np.ndarray, z_t: np.ndarray, t, sched: NoiseSchedule):
    """Mean and variance of q(z_{t-1} | z_t, z0). At t=1 this returns (z0, 0)."""
    t = sched.check_t(t)
    ab, ab_prev, a = sched.alpha_bar[t], sched.alpha_bar[t - 1], sched.alpha[t]
    c0 = np.sqrt(ab_prev) * (1.0 - a) / (1.0 - ab)
    ct = np.sqrt(a) * (1.0 - ab_prev) / (1.0 - ab)
    mu = _per_sample(c0, z0) * z0 + _per_sample(ct, z_t) * z_t
    sigma2 = (1.0 - ab_prev) * (1.0 - a) / (1.0 - ab)
    return mu, sigma2


def predict_x0(z_t: ArrayLike, eps_hat: ArrayLike, t, sched: NoiseSchedule):
    """Invert the forward marginal: ``(z_t - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t)``."""
    t = sched.check_t(t)
    ab = sched.alpha_bar[t]
    return _add(_scale(z_t, 1.0 / np.sqrt(ab)), _scale(eps_hat, -np.sqrt(1.0 - ab) / np.sqrt(ab)))


def ddpm_sigma(t, sched: NoiseSchedule, kind: str = "posterior"):
    """Reverse-step standard deviation; zero at t=1 for both choices."""
    t = sched.check_t(t)
    if kind == "posterior":
        var = (1.0 - sched.alpha_bar[t - 1]) * sched.beta[t] / (1.0 - sched.alpha_bar[t])
    elif kind == "beta":
        var = np.where(t > 1, sched.beta[t], 0.0)
    else:
        raise ValueError(f"unknown sigma kind {kind!r}; expected 'posterior' or 'beta'")
    return np.sqrt(var)


def ddpm_step(z_t: np.ndarray, t, eps_hat: np.ndarray, sched: NoiseSchedule,
              noise: Optional[np.ndarray] = None, sigma_kind: str = "posterior") -> np.ndarray:
    """Ancestral step ``(z_t - beta_t / sqrt(1 - abar_t) eps_hat) / sqrt(alpha_t) + sigma_t noise``."""
    t = sched.check_t(t)
    a, ab = sched.alpha[t], sched.alpha_bar[t]
    mean = _per_sample(1.0 / np.sqrt(a), z_t) * (z_t - _per_sample((1.0 - a) / np.sqrt(1.0 - ab), z_t) * eps_hat)
    if noise is None:
        return mean
    return mean + _per_sample(ddpm_sigma(t, sched, sigma_kind), z_t) * noise


def ddim_sigma(t: int, t_prev: int, sched: NoiseSchedule, eta: float) -> float:
    ab, ab_prev = sched.alpha_bar[t], sched.alpha_bar[t_prev]
    return float(eta * np.sqrt((1.0 - ab_prev) / (1.0 - ab)) * np.sqrt(1.0 - ab / ab_prev))


def ddim_step(z_t: np.ndarray, t: int, t_prev: int, eps_hat: np.ndarray, sched: NoiseSchedule,
              eta: float = 0.0, noise: Optional[np.ndarray] = None) -> np.ndarray:
    """Generalised step from ``t`` to any earlier ``t_prev`` (0 means clean data)."""
    sched.check_t(t)
    if not (0 <= t_prev < t):
        raise ValueError(f"invalid DDIM step pair t={t}, t_prev={t_prev}")
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must lie in [0, 1], got {eta}")
    ab_prev = sched.alpha_bar[t_prev]
    x0 = predict_x0(z_t, eps_hat, t, sched)
    sigma = ddim_sigma(t, t_prev, sched, eta)
    direction = np.sqrt(max(1.0 - ab_prev - sigma ** 2, 0.0))
    out = np.sqrt(ab_prev) * x0 + direction * eps_hat
    if sigma > 0.0 and noise is not None:
        out = out + sigma * noise
    return out
