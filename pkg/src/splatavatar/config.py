"""Run configuration: loss weights, schedule, rasterizer constants, seeds.

Configs load from JSON with strict key checking; every field has a
documented default, and anything unknown is rejected loudly.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np

from .losses import LossWeights
from .rasterizer import RasterConfig
from .scene import CATEGORY_NAMES


class ConfigError(ValueError):
    pass


@dataclass
class LearningRates:
    offsets: float = 2e-3
    rotation: float = 2e-3
    log_scale: float = 5e-3
    opacity_logit: float = 5e-2
    sh: float = 2.5e-2
    identity: float = 2.5e-2

    def as_dict(self):
        return dataclasses.asdict(self)


@dataclass
class Schedule:
    total_iters: int = 3000
    prune_interval: int = 300
    densify_interval: int = 300
    densify_start: int = 500
    densify_stop: int = 2500
    single_view_iters: int = 500
    opacity_prune_threshold: float = 0.005
    densify_fraction: float = 0.10
    gaussian_budget: int = 200_000
    lr: LearningRates = field(default_factory=LearningRates)

    def __post_init__(self):
        if self.prune_interval < 1 or self.densify_interval < 1:
            raise ConfigError("intervals must be >= 1")
        if not (self.densify_start <= self.densify_stop <= self.total_iters):
            raise ConfigError("need densify_start <= densify_stop <= total_iters")
        if not 0.0 < self.opacity_prune_threshold < 1.0:
            raise ConfigError("opacity_prune_threshold must be in (0,1)")


@dataclass
class RasterSettings:
    tile_size: int = 16
    lowpass: float = 0.3
    alpha_clamp: float = 0.99
    alpha_min: float = 1.0 / 255.0
    t_min: float = 1e-4
    background_color: tuple = (0.0, 0.0, 0.0)
    background_identity_magnitude: float = 1.0

    def build(self):
        return RasterConfig(
            tile_size=self.tile_size, lowpass=self.lowpass,
            alpha_clamp=self.alpha_clamp, alpha_min=self.alpha_min,
            t_min=self.t_min,
            background_color=np.asarray(self.background_color, dtype=np.float64),
            background_identity_magnitude=self.background_identity_magnitude)


@dataclass
class InitSettings:
    """Category-seeded asset initialization used when no splat file is given."""

    per_category_count: int = 600
    surface_offset: float = 0.02
    initial_scale: float = 0.02
    initial_opacity: float = 0.5
    identity_magnitude: float = 4.0


@dataclass
class TrainConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    schedule: Schedule = field(default_factory=Schedule)
    raster: RasterSettings = field(default_factory=RasterSettings)
    init: InitSettings = field(default_factory=InitSettings)
    seed: int = 0
    sh_degree: int = 0
    body_per_face: int = 1
    categories: tuple = CATEGORY_NAMES


def _from_dict(cls, data, path="config"):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        nested = _NESTED.get(name)
        if nested is not None:
            kwargs[name] = _from_dict(nested, value, f"{path}.{name}")
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


_NESTED = {"weights": LossWeights, "schedule": Schedule, "raster": RasterSettings,
           "init": InitSettings, "lr": LearningRates}


def load_config(path) -> TrainConfig:
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e
    return _from_dict(TrainConfig, data)


def config_to_dict(cfg: TrainConfig):
    return dataclasses.asdict(cfg)


def save_config(cfg: TrainConfig, path):
    with open(path, "w") as fh:
        json.dump(config_to_dict(cfg), fh, indent=2)
        fh.write("\n")
