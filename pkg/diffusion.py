# BSD 3-Clause License
#
# Copyright (c) 2025, the video-action-dit authors
# All rights reserved. See LICENSE for the full license text.

"""
DDPM noise schedule, timestep assignment and the deterministic DDIM sampler over the
joint (video latent, action) state
"""

import logging
from dataclasses import dataclass

import numpy as np

from codec import from_model_range
from utils import NumericalError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DiffusionSchedule:
    timesteps: int
    betas: np.ndarray               # length T + 1, betas[0] = 0
    alphas_cumprod: np.ndarray      # length T + 1, alphas_cumprod[0] = 1

    @property
    def alphas(self):
        return 1.0 - self.betas


def build_schedule(timesteps=1000, beta_min=1e-4, beta_max=0.02):
    """
    Linear beta schedule with the empty product at index 0
    :param timesteps: T
    :param beta_min: first beta
    :param beta_max: last beta
    :return: DiffusionSchedule with float64 tables of length T + 1
    """
    if timesteps < 1 or not 0.0 < beta_min <= beta_max < 1.0:
        raise ValueError("Invalid schedule specified, need T >= 1 and 0 < beta_min <= beta_max < 1!")
    betas = np.concatenate([[0.0], np.linspace(beta_min, beta_max, timesteps, dtype=np.float64)])
    alphas_cumprod = np.cumprod(1.0 - betas)
    return DiffusionSchedule(timesteps, betas, alphas_cumprod)


def _coefficients(sched, t, ndim, dtype):
    t = np.asarray(t)
    if np.any(t < 0) or np.any(t > sched.timesteps):
        raise ValueError(f"Invalid timestep specified, must lie in [0, {sched.timesteps}]")
    abar = sched.alphas_cumprod[t]
    abar = abar.reshape(abar.shape + (1,) * (ndim - abar.ndim))
    return np.sqrt(abar).astype(dtype), np.sqrt(1.0 - abar).astype(dtype)


def add_noise(x0, eps, t, sched):
    """
    Forward process x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps
    :param x0: clean values, leading axis is the batch when t is an array
    :param eps: standard normal noise of the same shape
    :param t: scalar timestep or one per batch element
    :param sched: DiffusionSchedule
    :return: x_t in the dtype of x0
    """
    x0, eps = np.asarray(x0), np.asarray(eps)
    if x0.shape != eps.shape:
        raise ValueError(f"Shape mismatch between x0 {x0.shape} and eps {eps.shape}")
    dtype = x0.dtype if np.issubdtype(x0.dtype, np.floating) else np.float64
    signal, noise = _coefficients(sched, t, x0.ndim, dtype)
    return signal * x0 + noise * eps.astype(dtype)


def sample_timesteps(mode, rng, timesteps, size=None):
    """
    Draw (t_video, t_action) uniformly in [1, T]
    :param mode: sync (shared draw) or async (independent draws)
    :param rng: numpy Generator
    :param timesteps: T
    :param size: batch size, None for scalars
    """
    t_video = rng.integers(1, timesteps + 1, size=size)
    if mode == "sync":
        return t_video, np.copy(t_video)
    if mode == "async":
        return t_video, rng.integers(1, timesteps + 1, size=size)
    raise ValueError(f"Invalid timestep mode specified: {mode}")


def ddim_timesteps(timesteps, steps):
    """
    Evenly spaced, strictly decreasing sub-schedule from T down to 0 (steps + 1 entries)
    """
    if not 1 <= steps <= timesteps:
        raise ValueError(f"Invalid DDIM steps specified: {steps}, must lie in [1, {timesteps}]")
    return np.floor(np.linspace(timesteps, 0, steps + 1) + 0.5).astype(np.int64)


def _ddim_update(x, eps, abar_t, abar_s, clip):
    x0 = (x - np.sqrt(1.0 - abar_t) * eps) / np.sqrt(abar_t)
    if clip:
        x0 = np.clip(x0, -1.0, 1.0)
    if abar_s >= 1.0:
        return x0
    return np.sqrt(abar_s) * x0 + np.sqrt(1.0 - abar_s) * eps


def _check(values, step):
    for value in values:
        if value is not None and not np.all(np.isfinite(value)):
            raise NumericalError(f"Non-finite sample at DDIM step {step}")


def ddim_sample(eps_model, video_shape, action_shape, sched, steps=50, seed=0, infer_mode="joint", clip=True):
    """
    Deterministic (eta = 0) DDIM over the joint state, all randomness drawn from seed
    :param eps_model: callable (x_video, x_action, t_video, t_action) -> (eps_video, eps_action);
                      x_video is None for models without future latents, timesteps are int arrays [B]
    :param video_shape: shape of the noisy future latents [B, ...] or None
    :param action_shape: shape of the noisy action chunk [B, K, 7]
    :param sched: DiffusionSchedule
    :param steps: DDIM steps in [1, T]
    :param seed: seed of the initial Gaussian noise
    :param infer_mode: joint (both modalities each step) or two_stage (video first, then actions)
    :param clip: clamp x0 predictions to [-1, 1]
    :return: (future latents in [0, 1] or None, actions in normalised [-1, 1] space), float32
    """
    if infer_mode not in ("joint", "two_stage"):
        raise ValueError(f"Invalid inference mode specified: {infer_mode}")
    taus = ddim_timesteps(sched.timesteps, steps)
    abar = sched.alphas_cumprod
    rng = np.random.default_rng(seed)
    x_video = rng.standard_normal(video_shape) if video_shape is not None else None
    x_action = rng.standard_normal(action_shape)
    batch = action_shape[0]

    def full(t):
        return np.full((batch,), int(t), dtype=np.int64)

    if infer_mode == "joint" or x_video is None:
        for i, (t, s) in enumerate(zip(taus[:-1], taus[1:])):
            eps_video, eps_action = eps_model(x_video, x_action, full(t), full(t))
            if x_video is not None:
                x_video = _ddim_update(x_video, np.asarray(eps_video, np.float64), abar[t], abar[s], clip)
            x_action = _ddim_update(x_action, np.asarray(eps_action, np.float64), abar[t], abar[s], clip)
            _check((x_video, x_action), i)
    else:
        # stage one: video with the actions held at pure noise
        for i, (t, s) in enumerate(zip(taus[:-1], taus[1:])):
            eps_video, _ = eps_model(x_video, x_action, full(t), full(sched.timesteps))
            x_video = _ddim_update(x_video, np.asarray(eps_video, np.float64), abar[t], abar[s], clip)
            _check((x_video,), i)
        # stage two: actions conditioned on the denoised video, at the smallest timestep training draws
        for i, (t, s) in enumerate(zip(taus[:-1], taus[1:])):
            _, eps_action = eps_model(x_video, x_action, full(1), full(t))
            x_action = _ddim_update(x_action, np.asarray(eps_action, np.float64), abar[t], abar[s], clip)
            _check((x_action,), len(taus) - 1 + i)

    video = from_model_range(x_video).astype(np.float32) if x_video is not None else None
    return video, x_action.astype(np.float32)
