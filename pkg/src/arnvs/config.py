"""Declarative run configuration: JSON/TOML file plus command-line overrides.

Every module's settings live in one nested structure with defaults; unknown
keys are rejected. The merged config is written verbatim into every run
directory so runs are reproducible from (config, seed).
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .denoiser import DenoiserConfig
from .diffusion import AugmentationConfig, SamplerConfig
from .engine import RolloutConfig
from .geometry import PoseDistanceParams
from .training import OptimizerConfig


class ConfigError(ValueError):
    pass


@dataclass
class DatasetSection:
    scenes: int = 64
    poses_per_scene: int = 64
    image_size: int = 16
    eval_scenes: int = 4


@dataclass
class ModelSection:
    image_size: int = 16
    channels: int = 3
    patch_size: int = 2
    width: int = 128
    depth: int = 6
    heads: int = 4
    head_dim: int = 32
    framewise_attention_at: list = field(default_factory=lambda: [3, 4, 5])
    noise_embed_dim: int = 64
    zero_init_frame_attention: bool = True
    cape_enabled: bool = True
    dtype: str = "float32"


@dataclass
class ScheduleSection:
    kind: str = "cosine"
    timesteps: int = 64


@dataclass
class SamplerSection:
    num_steps: int = 16
    eta: float = 0.0


@dataclass
class AugmentationSection:
    context_noise_level: int = 2
    enabled: bool = True
    augment_inputs: bool = False


@dataclass
class WindowSection:
    window_k: int | None = None
    rotation_weight: float = 1.0
    translation_scale: float = 1.0
    cache_capacity: int | None = None


@dataclass
class TrainSection:
    steps: int = 5000
    batch_size: int = 4
    frames_per_sequence: int = 8
    lr: float = 1e-4
    warmup_steps: int = 200
    ema_decay: float = 0.999
    checkpoint_every: int = 1000
    causal: bool = True


@dataclass
class ServiceSection:
    host: str = "127.0.0.1"
    port: int = 8000
    max_sessions: int = 64
    queue_requests: bool = False


@dataclass
class RunConfig:
    seed: int = 0
    dataset: DatasetSection = field(default_factory=DatasetSection)
    model: ModelSection = field(default_factory=ModelSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    augmentation: AugmentationSection = field(default_factory=AugmentationSection)
    window: WindowSection = field(default_factory=WindowSection)
    train: TrainSection = field(default_factory=TrainSection)
    service: ServiceSection = field(default_factory=ServiceSection)

    # -- derived module configs -------------------------------------------

    def denoiser_config(self) -> DenoiserConfig:
        m = self.model
        try:
            return DenoiserConfig(
                image_size=m.image_size,
                channels=m.channels,
                patch_size=m.patch_size,
                width=m.width,
                depth=m.depth,
                heads=m.heads,
                head_dim=m.head_dim,
                framewise_attention_at=tuple(m.framewise_attention_at),
                noise_embed_dim=m.noise_embed_dim,
                num_timesteps=self.schedule.timesteps,
                zero_init_frame_attention=m.zero_init_frame_attention,
                cape_enabled=m.cape_enabled,
                dtype=m.dtype,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def optimizer_config(self) -> OptimizerConfig:
        t = self.train
        return OptimizerConfig(
            lr=t.lr, warmup_steps=t.warmup_steps, ema_decay=t.ema_decay
        )

    def rollout_config(self, seed: int | None = None) -> RolloutConfig:
        try:
            return RolloutConfig(
                sampler=SamplerConfig(num_steps=self.sampler.num_steps, eta=self.sampler.eta),
                augmentation=AugmentationConfig(
                    context_noise_level=self.augmentation.context_noise_level,
                    enabled=self.augmentation.enabled,
                    augment_inputs=self.augmentation.augment_inputs,
                ),
                window_k=self.window.window_k,
                distance=PoseDistanceParams(
                    rotation_weight=self.window.rotation_weight,
                    translation_scale=self.window.translation_scale,
                ),
                cache_capacity=self.window.cache_capacity,
                seed=self.seed if seed is None else seed,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    # -- (de)serialization ---------------------------------------------------

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))


def config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be an object")
    sections = {f.name: f for f in dataclasses.fields(RunConfig)}
    unknown = set(data) - set(sections)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    kwargs = {}
    section_types = {
        "dataset": DatasetSection,
        "model": ModelSection,
        "schedule": ScheduleSection,
        "sampler": SamplerSection,
        "augmentation": AugmentationSection,
        "window": WindowSection,
        "train": TrainSection,
        "service": ServiceSection,
    }
    for name, value in data.items():
        if name in section_types:
            if not isinstance(value, dict):
                raise ConfigError(f"config section {name!r} must be an object")
            cls = section_types[name]
            known = {f.name for f in dataclasses.fields(cls)}
            bad = set(value) - known
            if bad:
                raise ConfigError(f"unknown config keys in {name!r}: {sorted(bad)}")
            kwargs[name] = cls(**value)
        else:
            kwargs[name] = value
    try:
        return RunConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Config file (JSON or TOML by suffix) merged with flag overrides.

    overrides maps dotted paths like "train.steps" to values; flags win.
    """
    data: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        if p.suffix == ".toml":
            try:
                import tomllib
            except ModuleNotFoundError:
                import tomli as tomllib

            data = tomllib.loads(p.read_text())
        elif p.suffix == ".json":
            data = json.loads(p.read_text())
        else:
            raise ConfigError(f"config file must be .json or .toml, got {p.suffix}")
    cfg = config_from_dict(data)
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        target = cfg
        *parents, leaf = dotted.split(".")
        for part in parents:
            if not hasattr(target, part):
                raise ConfigError(f"unknown override section {part!r}")
            target = getattr(target, part)
        if not hasattr(target, leaf):
            raise ConfigError(f"unknown override key {dotted!r}")
        setattr(target, leaf, value)
    return cfg
