"""Autoregressive N-to-M rollout sessions.

A Session owns per-layer KV caches and an ordered history of committed frames.
Input views are encoded once and cached; each generated view selects its
context window by pose distance, denoises against that sub-cache, is re-noised
to the context level, encoded, and cached. The paper-style non-causal parallel
baseline (joint denoising, no cache) lives here too, as does a no-cache replay
used to verify cache equivalence.
"""

from __future__ import annotations

import json
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attention import FlopCounter, KVCacheLayer, select_window
from .denoiser import DenoiserConfig, NoisyFrameBatch, forward
from .diffusion import (
    AugmentationConfig,
    NoiseSchedule,
    SamplerConfig,
    apply_conditioning_augmentation,
    ddim_denoise_frame,
    ddim_timesteps,
)
from .geometry import Pose, PoseDistanceParams
from .worldgen import image_to_png


class EngineError(RuntimeError):
    pass


@dataclass(frozen=True)
class RolloutConfig:
    """Inference-time knobs bundled for a session."""

    sampler: SamplerConfig = SamplerConfig()
    augmentation: AugmentationConfig = AugmentationConfig()
    window_k: int | None = None  # None: unbounded window
    distance: PoseDistanceParams = PoseDistanceParams()
    cache_capacity: int | None = None  # FIFO eviction knob, unbounded by default
    seed: int = 0

    def to_json(self) -> dict:
        return {
            "sampler": {"num_steps": self.sampler.num_steps, "eta": self.sampler.eta, "seed": self.sampler.seed},
            "augmentation": {
                "context_noise_level": self.augmentation.context_noise_level,
                "enabled": self.augmentation.enabled,
                "augment_inputs": self.augmentation.augment_inputs,
            },
            "window_k": self.window_k,
            "distance": {
                "rotation_weight": self.distance.rotation_weight,
                "translation_scale": self.distance.translation_scale,
            },
            "cache_capacity": self.cache_capacity,
            "seed": self.seed,
        }

    def with_seed(self, seed: int) -> "RolloutConfig":
        return RolloutConfig(
            sampler=self.sampler,
            augmentation=self.augmentation,
            window_k=self.window_k,
            distance=self.distance,
            cache_capacity=self.cache_capacity,
            seed=seed,
        )


@dataclass
class CommittedFrame:
    frame_id: int
    image: np.ndarray  # clean image in [-1, 1], what callers see
    cache_image: np.ndarray  # what was encoded into the cache (possibly re-noised)
    pose: Pose
    source: str  # "input" | "generated"
    noise_level: int  # level the cache entry was encoded at
    window: list  # frame_ids attended while encoding


@dataclass
class FrameDiagnostics:
    frame_id: int
    window: list
    steps: int
    attention_flops: int
    wall_ms: float

    def to_json(self) -> dict:
        return {
            "frame_id": self.frame_id,
            "window": list(self.window),
            "steps": self.steps,
            "attention_flops": self.attention_flops,
            "wall_ms": self.wall_ms,
        }


class Session:
    """Single-writer autoregressive session; see module docstring."""

    def __init__(self, params: dict, config: DenoiserConfig, schedule: NoiseSchedule, rollout: RolloutConfig):
        if config.num_timesteps != schedule.T:
            raise EngineError("denoiser num_timesteps and schedule T disagree")
        self.params = params
        self.config = config
        self.schedule = schedule
        self.rollout = rollout
        self.caches = {
            i: KVCacheLayer(capacity=rollout.cache_capacity) for i in config.framewise_attention_at
        }
        self.committed: list[CommittedFrame] = []
        self.diagnostics: list[FrameDiagnostics] = []
        self.rng = np.random.default_rng([rollout.seed, 0x5E5510])
        self._next_frame_id = 0

    # -- internals ---------------------------------------------------------

    def _single_frame_batch(self, image: np.ndarray, pose: Pose, t: int) -> NoisyFrameBatch:
        return NoisyFrameBatch(
            images=np.asarray(image, dtype=self.config.np_dtype)[None, None],
            poses=[[pose]],
            timesteps=np.array([[t]], dtype=np.int64),
        )

    def _encode_and_cache(self, image, pose: Pose, t: int, sub_caches, frame_id: int, counter=None):
        """Conditioning pass: compute the frame's K/V against sub_caches and
        append them to the session's full caches."""
        _, kv = forward(
            self.params,
            self._single_frame_batch(image, pose, t),
            self.config,
            caches=sub_caches,
            causal=True,
            counter=counter,
            collect_kv=True,
        )
        for layer_idx, per_frame in kv.items():
            keys, values = per_frame[0]
            self.caches[layer_idx].append(frame_id, keys, values, pose, t)

    def _window_caches(self, pose: Pose):
        """Top-k nearest committed frames; returns (frame_ids, sub_caches)."""
        any_layer = next(iter(self.caches.values()), None)
        if any_layer is None or not any_layer.entries:
            return [f.frame_id for f in self.committed], dict(self.caches)
        chosen = select_window(any_layer, pose, self.rollout.window_k, self.rollout.distance)
        ids = [e.frame_id for e in chosen]
        if len(ids) < len(any_layer.entries):
            sub = {i: c.subset(ids) for i, c in self.caches.items()}
        else:
            sub = dict(self.caches)
        return ids, sub

    def _validate_image(self, image) -> np.ndarray:
        image = np.asarray(image, dtype=self.config.np_dtype)
        expected = (self.config.image_size, self.config.image_size, self.config.channels)
        if image.shape != expected:
            raise EngineError(f"image shape {image.shape} does not match config {expected}")
        if np.abs(image).max() > 1.0 + 1e-6:
            raise EngineError("image values must lie in [-1, 1]")
        return image

    # -- API ---------------------------------------------------------------

    def push_input_view(self, image: np.ndarray, pose: Pose) -> CommittedFrame:
        image = self._validate_image(image)
        for frame in self.committed:
            if (
                frame.source == "input"
                and np.array_equal(frame.pose.matrix(), pose.matrix())
                and np.array_equal(frame.image, image)
            ):
                raise EngineError("duplicate input frame (same pose and pixels)")

        if self.rollout.augmentation.augment_inputs and self.rollout.augmentation.enabled:
            cache_img, level = apply_conditioning_augmentation(
                image, self.rollout.augmentation, self.rng, self.schedule
            )
        else:
            cache_img, level = image, 0

        t0 = time.perf_counter()
        counter = FlopCounter()
        frame_id = self._next_frame_id
        self._next_frame_id += 1
        window = [f.frame_id for f in self.committed]
        self._encode_and_cache(cache_img, pose, level, dict(self.caches), frame_id, counter)
        frame = CommittedFrame(frame_id, image, cache_img, pose, "input", level, window)
        self.committed.append(frame)
        self.diagnostics.append(
            FrameDiagnostics(frame_id, window, 0, counter.total, (time.perf_counter() - t0) * 1e3)
        )
        return frame

    def generate_view(self, pose: Pose) -> np.ndarray:
        if not self.committed:
            warnings.warn("generating without any committed views (unconditional)", stacklevel=2)
        t0 = time.perf_counter()
        counter = FlopCounter()
        window_ids, sub_caches = self._window_caches(pose)

        def eps_fn(x_t, t):
            batch = self._single_frame_batch(x_t, pose, t)
            out = forward(self.params, batch, self.config, caches=sub_caches, causal=True, counter=counter)
            return out[0, 0]

        shape = (self.config.image_size, self.config.image_size, self.config.channels)
        clean = ddim_denoise_frame(
            eps_fn, shape, self.schedule, self.rollout.sampler, self.rng, dtype=self.config.np_dtype
        )

        cache_img, level = apply_conditioning_augmentation(
            clean, self.rollout.augmentation, self.rng, self.schedule
        )
        frame_id = self._next_frame_id
        self._next_frame_id += 1
        self._encode_and_cache(cache_img, pose, level, sub_caches, frame_id, counter)
        self.committed.append(CommittedFrame(frame_id, clean, cache_img, pose, "generated", level, window_ids))
        self.diagnostics.append(
            FrameDiagnostics(
                frame_id,
                window_ids,
                self.rollout.sampler.num_steps,
                counter.total,
                (time.perf_counter() - t0) * 1e3,
            )
        )
        return clean


def session_new(
    params: dict, config: DenoiserConfig, schedule: NoiseSchedule, rollout: RolloutConfig
) -> Session:
    return Session(params, config, schedule, rollout)


@dataclass
class RolloutResult:
    images: list  # generated images in request order
    poses: list
    diagnostics: list  # FrameDiagnostics for generated frames only
    config: dict = field(default_factory=dict)

    def save(self, run_dir) -> Path:
        run = Path(run_dir)
        (run / "images").mkdir(parents=True, exist_ok=True)
        files = []
        for i, img in enumerate(self.images):
            name = f"frame_{i:04d}.png"
            image_to_png(run / "images" / name, img)
            files.append(name)
        manifest = {
            "config": self.config,
            "poses": [p.to_json() for p in self.poses],
            "files": files,
            "diagnostics": [d.to_json() for d in self.diagnostics],
        }
        (run / "manifest.json").write_text(json.dumps(manifest, indent=1))
        return run


def rollout(
    params: dict,
    inputs: list,
    target_poses: list,
    config: DenoiserConfig,
    schedule: NoiseSchedule,
    rcfg: RolloutConfig,
) -> RolloutResult:
    """New session, push all inputs, generate targets in the given order."""
    session = session_new(params, config, schedule, rcfg)
    for image, pose in inputs:
        session.push_input_view(image, pose)
    images = [session.generate_view(p) for p in target_poses]
    gen_diags = [d for d in session.diagnostics if d.steps > 0]
    return RolloutResult(images=images, poses=list(target_poses), diagnostics=gen_diags, config=rcfg.to_json())


def replay_without_cache(
    params: dict,
    inputs: list,
    target_poses: list,
    config: DenoiserConfig,
    schedule: NoiseSchedule,
    rcfg: RolloutConfig,
) -> RolloutResult:
    """Reference rollout that re-encodes the entire committed history from
    scratch before every generation instead of reusing incremental cache
    writes. Consumes the rng stream in the same order as rollout(), so its
    outputs must match the cached path (the cache-equivalence oracle)."""
    session = session_new(params, config, schedule, rcfg)
    for image, pose in inputs:
        session.push_input_view(image, pose)

    images = []
    for pose in target_poses:
        rebuilt = Session(params, config, schedule, rcfg)
        for frame in session.committed:
            sub = {i: c.subset(frame.window) for i, c in rebuilt.caches.items()}
            rebuilt._encode_and_cache(frame.cache_image, frame.pose, frame.noise_level, sub, frame.frame_id)
            rebuilt.committed.append(frame)
        rebuilt._next_frame_id = session._next_frame_id
        rebuilt.rng = session.rng  # continue the shared stream
        images.append(rebuilt.generate_view(pose))
        session = rebuilt
    gen_diags = [d for d in session.diagnostics if d.steps > 0]
    return RolloutResult(images=images, poses=list(target_poses), diagnostics=gen_diags, config=rcfg.to_json())


def generate_parallel_baseline(
    params: dict,
    inputs: list,
    target_poses: list,
    config: DenoiserConfig,
    schedule: NoiseSchedule,
    rcfg: RolloutConfig,
    model_is_causal: bool = False,
) -> RolloutResult:
    """Joint non-causal denoising of all targets at a shared timestep.

    Inputs stay clean at level 0 throughout; every target steps through the
    same timestep sequence in lockstep; no KV caching. The model should have
    been trained with causal=False (pass model_is_causal=True to force a
    causal model through this path; a warning is emitted)."""
    if model_is_causal:
        warnings.warn("running a causal model through the non-causal parallel baseline", stacklevel=2)
    if not target_poses:
        return RolloutResult(images=[], poses=[], diagnostics=[], config=rcfg.to_json())

    dt = config.np_dtype
    rng = np.random.default_rng([rcfg.seed, 0x5E5510])
    n, m = len(inputs), len(target_poses)
    size = (config.image_size, config.image_size, config.channels)
    input_images = []
    for image, _ in inputs:
        image = np.asarray(image, dtype=dt)
        if image.shape != size:
            raise EngineError(f"input image shape {image.shape} does not match config")
        if np.abs(image).max() > 1.0 + 1e-6:
            raise EngineError("input image values must lie in [-1, 1]")
        input_images.append(image)

    poses = [p for _, p in inputs] + list(target_poses)
    x = rng.standard_normal((m,) + size).astype(dt)
    taus = ddim_timesteps(schedule.T, rcfg.sampler.num_steps)
    ab = schedule.alpha_bar
    t0 = time.perf_counter()
    counter = FlopCounter()
    steps = 0
    for i in range(len(taus) - 1, -1, -1):
        t = int(taus[i])
        if ab[t] == 1.0:
            continue
        frames = np.stack(input_images + list(x)) if n else x.copy()
        ts = np.array([0] * n + [t] * m, dtype=np.int64)
        batch = NoisyFrameBatch(images=frames[None], poses=[poses], timesteps=ts[None])
        eps_hat = forward(params, batch, config, causal=False, counter=counter)[0, n:]
        steps += 1
        x0_hat = np.clip((x - np.sqrt(1.0 - ab[t]) * eps_hat) / np.sqrt(ab[t]), -1.0, 1.0)
        if i == 0:
            x = x0_hat
        else:
            t_prev = int(taus[i - 1])
            x = np.sqrt(ab[t_prev]) * x0_hat + np.sqrt(1.0 - ab[t_prev]) * eps_hat
        x = x.astype(dt, copy=False)
    x = np.clip(x, -1.0, 1.0)
    wall = (time.perf_counter() - t0) * 1e3
    input_ids = list(range(n))
    diags = [FrameDiagnostics(n + i, input_ids, steps, counter.total // m, wall / m) for i in range(m)]
    return RolloutResult(images=list(x), poses=list(target_poses), diagnostics=diags, config=rcfg.to_json())


def autoregressive_with_parallel_model(
    params: dict,
    inputs: list,
    target_poses: list,
    config: DenoiserConfig,
    schedule: NoiseSchedule,
    rcfg: RolloutConfig,
) -> RolloutResult:
    """Non-causal model used autoregressively: one target at a time via joint
    denoising over inputs plus previously generated frames (committed clean,
    no augmentation, no cache). The drifting ablation arm."""
    committed = list(inputs)
    images, diags = [], []
    for i, pose in enumerate(target_poses):
        res = generate_parallel_baseline(
            params, committed, [pose], config, schedule, rcfg.with_seed(rcfg.seed + 7919 * i)
        )
        images.append(res.images[0])
        diags.append(res.diagnostics[0])
        committed = committed + [(res.images[0], pose)]
    return RolloutResult(images=images, poses=list(target_poses), diagnostics=diags, config=rcfg.to_json())
