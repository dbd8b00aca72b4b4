"""Noise schedule, per-frame noising, and deterministic DDIM sampling.

Frames are trained with independently sampled noise levels, so at inference a
frame can denoise at its own timestep while context frames sit at small fixed
levels; conditioning augmentation re-noises committed frames to such a level
before caching them.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np


class DiffusionError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    kind: str
    alpha_bar: np.ndarray  # (T,), strictly decreasing, in (0, 1]

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        if ab.ndim != 1 or ab.shape[0] < 2:
            raise DiffusionError("alpha_bar must be a 1-D array with T >= 2")
        if not (np.all(ab > 0.0) and np.all(ab <= 1.0)):
            raise DiffusionError("alpha_bar values must lie in (0, 1]")
        if not np.all(np.diff(ab) < 0.0):
            raise DiffusionError("alpha_bar must be strictly decreasing")
        object.__setattr__(self, "alpha_bar", ab)

    @property
    def T(self) -> int:
        return int(self.alpha_bar.shape[0])

    def to_json(self) -> dict:
        return {"kind": self.kind, "T": self.T}


@dataclass(frozen=True)
class SamplerConfig:
    num_steps: int = 16
    eta: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.num_steps < 1:
            raise DiffusionError("num_steps must be >= 1")
        if self.eta != 0.0:
            raise DiffusionError("only deterministic sampling (eta=0) is supported")


@dataclass(frozen=True)
class AugmentationConfig:
    """Noise level applied to committed frames before they are cached."""

    context_noise_level: int = 2
    enabled: bool = True
    augment_inputs: bool = False  # also re-noise pushed input views

    def __post_init__(self):
        if self.context_noise_level < 0:
            raise DiffusionError("context_noise_level must be >= 0")


def make_schedule(kind: str, T: int) -> NoiseSchedule:
    """Cosine (default) or linear cumulative-alpha schedule with T steps."""
    if T < 2:
        raise DiffusionError("T must be >= 2")
    if kind == "cosine":
        s = 0.008
        t = np.arange(T, dtype=np.float64)
        f = np.cos(((t / T + s) / (1.0 + s)) * math.pi / 2.0) ** 2
        f0 = math.cos((s / (1.0 + s)) * math.pi / 2.0) ** 2
        alpha_bar = np.clip(f / f0, 1e-5, 1.0)
    elif kind == "linear":
        # Endpoints defined at a 1000-step reference, rescaled to T.
        scale = 1000.0 / T
        betas = np.linspace(1e-4 * scale, 0.02 * scale, T)
        if betas.max() >= 1.0:
            raise DiffusionError(f"linear schedule degenerate for T={T}")
        alpha_bar = np.cumprod(1.0 - betas)
    else:
        raise DiffusionError(f"unknown schedule kind {kind!r}")
    return NoiseSchedule(kind=kind, alpha_bar=alpha_bar)


def add_noise(x: np.ndarray, t: int, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """sqrt(abar_t) x + sqrt(1 - abar_t) eps."""
    if not 0 <= t < schedule.T:
        raise DiffusionError(f"timestep {t} out of range [0, {schedule.T})")
    x = np.asarray(x)
    eps = np.asarray(eps)
    if x.shape != eps.shape:
        raise DiffusionError("x and eps shapes differ")
    ab = schedule.alpha_bar[t]
    return (math.sqrt(ab) * x + math.sqrt(1.0 - ab) * eps).astype(x.dtype, copy=False)


def sample_frame_timesteps(
    n_frames: int, rng: np.random.Generator, T: int, shared: bool = False
) -> np.ndarray:
    """Independent uniform timesteps per frame; shared=True draws one for all.

    The shared mode is the non-causal baseline's convention.
    """
    if n_frames < 1:
        raise DiffusionError("n_frames must be >= 1")
    if shared:
        return np.full(n_frames, rng.integers(0, T), dtype=np.int64)
    return rng.integers(0, T, size=n_frames)


def ddim_timesteps(T: int, num_steps: int) -> np.ndarray:
    """Uniformly strided ascending timestep subsequence ending at T-1."""
    if not 1 <= num_steps <= T:
        raise DiffusionError(f"num_steps must be in [1, {T}]")
    if num_steps == 1:
        return np.array([T - 1], dtype=np.int64)
    taus = np.round(np.linspace(0, T - 1, num_steps)).astype(np.int64)
    return np.unique(taus)


def ddim_denoise_frame(
    eps_fn,
    shape: tuple,
    schedule: NoiseSchedule,
    sampler: SamplerConfig,
    rng: np.random.Generator,
    dtype=np.float32,
) -> np.ndarray:
    """Deterministic DDIM from unit Gaussian at the largest selected timestep.

    eps_fn(x_t, t) predicts the noise for the frame being generated; context
    conditioning (cache, poses, noise levels) is closed over by the caller.
    Returns the final estimate clamped to [-1, 1].
    """
    taus = ddim_timesteps(schedule.T, sampler.num_steps)
    x = rng.standard_normal(shape).astype(dtype)
    ab = schedule.alpha_bar
    for i in range(len(taus) - 1, -1, -1):
        t = int(taus[i])
        if ab[t] == 1.0:
            # Noiseless level: the update is forced to x0_hat = x; no model call.
            eps_hat = np.zeros_like(x)
            x0_hat = x
        else:
            eps_hat = eps_fn(x, t)
            x0_hat = (x - math.sqrt(1.0 - ab[t]) * eps_hat) / math.sqrt(ab[t])
            # Pixel-space images live in [-1, 1]; clipping the running clean
            # estimate keeps the small-alpha extrapolation from diverging.
            x0_hat = np.clip(x0_hat, -1.0, 1.0)
        if i == 0:
            x = x0_hat
        else:
            t_prev = int(taus[i - 1])
            x = math.sqrt(ab[t_prev]) * x0_hat + math.sqrt(1.0 - ab[t_prev]) * eps_hat
        x = x.astype(dtype, copy=False)
    return np.clip(x, -1.0, 1.0)


def apply_conditioning_augmentation(
    frame: np.ndarray,
    cfg: AugmentationConfig,
    rng: np.random.Generator,
    schedule: NoiseSchedule,
) -> tuple[np.ndarray, int]:
    """Re-noise a committed frame to the context level; returns (image, level).

    Disabled augmentation is the identity at level 0. The returned level is
    what the frame's cache entry and noise embedding must use.
    """
    if not cfg.enabled or cfg.context_noise_level == 0:
        return frame, 0
    t_ctx = cfg.context_noise_level
    if t_ctx >= schedule.T:
        raise DiffusionError(f"context_noise_level {t_ctx} out of range for T={schedule.T}")
    if t_ctx > schedule.T // 4:
        warnings.warn(
            f"context_noise_level {t_ctx} is large relative to T={schedule.T}",
            stacklevel=2,
        )
    eps = rng.standard_normal(frame.shape).astype(frame.dtype)
    return add_noise(frame, t_ctx, eps, schedule), t_ctx
