"""Training loop: Adam with linear warmup, EMA shadow params, batch assembly.

Batches are derived from a per-step seeded generator (seed, step), so resuming
from a checkpoint replays the identical stream and matches an uninterrupted
run bitwise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .denoiser import DenoiserConfig, NoisyFrameBatch, init_params, loss_and_grads, zero_grads
from .diffusion import NoiseSchedule, add_noise, sample_frame_timesteps


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 1e-4
    warmup_steps: int = 200
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    ema_decay: float = 0.999

    def to_json(self) -> dict:
        return {
            "lr": self.lr,
            "warmup_steps": self.warmup_steps,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "ema_decay": self.ema_decay,
        }

    @staticmethod
    def from_json(d: dict) -> "OptimizerConfig":
        return OptimizerConfig(**d)


@dataclass
class TrainState:
    params: dict
    ema: dict
    m: dict
    v: dict
    step: int = 0


def init_train_state(config: DenoiserConfig, seed: int) -> TrainState:
    params = init_params(config, np.random.default_rng([seed, 0xA11CE]))
    return TrainState(
        params=params,
        ema={k: v.copy() for k, v in params.items()},
        m=zero_grads(params),
        v=zero_grads(params),
        step=0,
    )


def adam_update(state: TrainState, grads: dict, opt: OptimizerConfig) -> None:
    """One in-place Adam step (bias-corrected) plus the EMA update."""
    t = state.step + 1
    lr = opt.lr
    if opt.warmup_steps > 0:
        lr *= min(1.0, t / opt.warmup_steps)
    c1 = 1.0 - opt.beta1**t
    c2 = 1.0 - opt.beta2**t
    for name, p in state.params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * (g * g)
        if lr != 0.0:
            p -= (lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)).astype(p.dtype)
        ema = state.ema[name]
        ema *= opt.ema_decay
        ema += (1.0 - opt.ema_decay) * p
    state.step = t


def train_step(
    state: TrainState,
    batch: NoisyFrameBatch,
    config: DenoiserConfig,
    opt: OptimizerConfig,
    causal: bool = True,
) -> float:
    """One gradient step on the noise-prediction loss; returns the loss."""
    loss, grads = loss_and_grads(state.params, batch, config, causal=causal)
    if not np.isfinite(loss):
        gnorm = float(sum(float(np.abs(g).max(initial=0.0)) for g in grads.values()))
        pnorm = float(sum(float(np.abs(p).max(initial=0.0)) for p in state.params.values()))
        raise TrainingError(
            f"non-finite loss at step {state.step}: loss={loss}, "
            f"max|grad|sum={gnorm:.3e}, max|param|sum={pnorm:.3e}, "
            f"timesteps={batch.timesteps.tolist()}"
        )
    adam_update(state, grads, opt)
    return loss


@dataclass
class SceneFrames:
    """One scene's rendered pool: images (P, H, W, C) in [-1, 1] plus poses."""

    images: np.ndarray
    poses: list
    scale: float = 1.0


def assemble_batch(
    scenes: list[SceneFrames],
    rng: np.random.Generator,
    schedule: NoiseSchedule,
    frames_per_sequence: int,
    batch_size: int,
    causal: bool = True,
) -> NoisyFrameBatch:
    """Sample sequences and noise them for one training step.

    Causal mode: every frame gets an independent timestep and contributes to
    the loss. Non-causal mode (the parallel baseline): a random split into
    clean conditioning frames (t=0, masked out) and target frames sharing one
    timestep.
    """
    f = frames_per_sequence
    images, poses, ts, eps, mask = [], [], [], [], []
    for _ in range(batch_size):
        scene = scenes[rng.integers(len(scenes))]
        pool = len(scene.poses)
        if pool < f:
            raise TrainingError(f"scene pool {pool} smaller than sequence length {f}")
        idx = rng.choice(pool, size=f, replace=False)
        clean = scene.images[idx]
        noise = rng.standard_normal(clean.shape).astype(clean.dtype)
        if causal:
            t_seq = sample_frame_timesteps(f, rng, schedule.T)
            m_seq = np.ones(f)
        else:
            n_cond = int(rng.integers(1, f))
            t_shared = sample_frame_timesteps(f - n_cond, rng, schedule.T, shared=True)
            t_seq = np.concatenate([np.zeros(n_cond, dtype=np.int64), t_shared])
            m_seq = np.concatenate([np.zeros(n_cond), np.ones(f - n_cond)])
        noisy = np.stack([add_noise(clean[i], int(t_seq[i]), noise[i], schedule) for i in range(f)])
        images.append(noisy)
        poses.append([scene.poses[i] for i in idx])
        ts.append(t_seq)
        eps.append(noise)
        mask.append(m_seq)
    return NoisyFrameBatch(
        images=np.stack(images),
        poses=poses,
        timesteps=np.stack(ts),
        eps=np.stack(eps),
        loss_mask=np.stack(mask),
    )


def train(
    state: TrainState,
    scenes: list[SceneFrames],
    config: DenoiserConfig,
    schedule: NoiseSchedule,
    opt: OptimizerConfig,
    steps: int,
    batch_size: int,
    frames_per_sequence: int,
    seed: int,
    causal: bool = True,
    log_fn=None,
) -> TrainState:
    """Run `steps` additional steps, continuing from state.step."""
    for _ in range(steps):
        rng = np.random.default_rng([seed, 0xBA7C4, state.step])
        batch = assemble_batch(scenes, rng, schedule, frames_per_sequence, batch_size, causal=causal)
        loss = train_step(state, batch, config, opt, causal=causal)
        if log_fn is not None:
            log_fn(state.step, loss)
    return state
