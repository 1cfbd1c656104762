"""Reverse-diffusion sampling loop with one independent noise stream per image."""

from __future__ import annotations

import time
from typing import Callable, Optional, Sequence

import numpy as np

from ..tensor import Module, Tensor, no_grad
from .networks import rgb_to_tensor
from .schedule import NoiseSchedule, ddim_step, ddpm_step, timestep_subsequence

SAMPLERS = ("ddim", "ddpm")


def image_rng(seed: int, index: int) -> np.random.Generator:
    """Counter-based generator for image ``index``; independent of batch layout."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, index])))


def sample(denoiser: Module, conditioner: Module, codec: Module, cond_images: np.ndarray, s: int,
           sched: NoiseSchedule, seed: int, sampler_kind: str = "ddim", eta: float = 0.0,
           sigma_kind: str = "posterior", indices: Optional[Sequence[int]] = None, batch_size: int = 50,
           trace: Optional[Callable[[str], None]] = None) -> np.ndarray:
    """Generate (N, H, W) images in [-1, 1] conditioned on (N, H, W, 3) visible images.

    ``ddpm`` with ``s == T`` runs the ancestral chain; with ``s < T`` it
    takes DDIM steps with ``eta = 1`` over the sub-sequence. ``indices`` name
    the per-image noise streams (default ``0..N-1``).
    """
    if sampler_kind not in SAMPLERS:
        raise ValueError(f"unknown sampler {sampler_kind!r}; expected one of {SAMPLERS}")
    cond_images = np.asarray(cond_images)
    n = len(cond_images)
    steps = timestep_subsequence(sched.T_steps, s)
    indices = list(range(n)) if indices is None else list(indices)
    if len(indices) != n:
        raise ValueError("need one stream index per conditioning image")
    dtype = denoiser.out.weight.dtype
    H, W = cond_images.shape[1:3]
    f = codec.factor
    latent_shape = (codec.latent_c, H // f, W // f)
    use_ancestral = sampler_kind == "ddpm" and s == sched.T_steps
    step_eta = 1.0 if sampler_kind == "ddpm" else eta
    prevs = np.concatenate([[0], steps[:-1]])
    out = np.empty((n, H, W))
    with no_grad():
        for b0 in range(0, n, batch_size):
            sl = slice(b0, min(b0 + batch_size, n))
            rngs = [image_rng(seed, i) for i in indices[sl]]
            z = np.stack([r.standard_normal(latent_shape) for r in rngs]).astype(dtype)
            cond = conditioner(rgb_to_tensor(cond_images[sl], dtype=dtype))
            for t, t_prev in zip(steps[::-1], prevs[::-1]):
                t0 = time.perf_counter()
                eps = denoiser(Tensor(z), int(t), cond).data
                stochastic = use_ancestral or step_eta > 0
                noise = np.stack([r.standard_normal(latent_shape) for r in rngs]).astype(dtype) if stochastic else None
                if use_ancestral:
                    z = ddpm_step(z, int(t), eps, sched, noise, sigma_kind=sigma_kind)
                else:
                    z = ddim_step(z, int(t), int(t_prev), eps, sched, eta=step_eta, noise=noise)
                z = np.asarray(z, dtype=dtype)
                if trace is not None:
                    rms = float(np.sqrt(np.mean(z.astype(np.float64) ** 2)))
                    trace(f"batch={b0}\tt={int(t)}\tt_prev={int(t_prev)}\tz_rms={rms:.9e}"
                          f"\tseconds={time.perf_counter() - t0:.6f}")
            img = codec.decode(Tensor(z)).data[:, 0]
            out[sl] = np.clip(img, -1.0, 1.0)
    return out
