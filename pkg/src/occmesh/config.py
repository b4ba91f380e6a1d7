"""Run configuration: nested dataclasses, file loading, dotted overrides and hashing."""

from dataclasses import MISSING, asdict, dataclass, field, fields, is_dataclass
import hashlib
import json
from pathlib import Path
import zlib

import numpy as np
import yaml

from .conditioning import ModelConfig
from .errors import ConfigError
from .losses import LossWeights
from .synthdata import PRESETS


@dataclass
class DataConfig:
    presets: tuple = ("clear", "occluded", "severe")
    scenes_per_preset: int = 10
    n_persons: int = 2
    pose_noise: float = 0.35
    image_size: int = 224
    seed: int = 0

    def validate(self):
        self.presets = tuple(self.presets)
        bad = [p for p in self.presets if p not in PRESETS]
        if bad or not self.presets:
            raise ConfigError(f"unknown presets {bad}; choose from {tuple(PRESETS)}")
        if self.scenes_per_preset < 1 or not 1 <= self.n_persons <= 4:
            raise ConfigError("scenes_per_preset must be >= 1 and n_persons in 1..4")
        if self.image_size != 224:
            raise ConfigError("the regressor consumes 224x224 images")


@dataclass
class LossConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    sdf_resolution: int = 16
    render_size: int = 32
    sharpness: float = 50.0
    multi_scenes: int = 1  # scenes per step that also get collision and depth terms
    collision_min_separation: float = 0.1  # mean vertex distance below which a pair is a duplicate

    def validate(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if self.sdf_resolution < 8 or self.render_size < 4 or self.sharpness <= 0 or self.multi_scenes < 0 or self.collision_min_separation < 0:
            raise ConfigError("invalid multi-person loss settings")


@dataclass
class TrainConfig:
    steps: int = 100
    batch_scenes: int = 4
    lr: float = 1e-3
    grad_clip: float = 1.0  # max global gradient norm, 0 disables clipping
    seed: int = 0
    log_every: int = 1
    checkpoint_every: int = 0  # 0: only final and best
    holdout_scenes: int = 0  # last scenes of the dataset kept out of training
    context_steps: int = 0  # steps for the context estimator, 0 to skip it
    deterministic: bool = True
    workers: int = 0

    def validate(self):
        if self.steps < 0 or self.batch_scenes < 1 or self.lr <= 0 or self.holdout_scenes < 0 or self.grad_clip < 0:
            raise ConfigError("steps, batch_scenes, lr and holdout_scenes must be positive")
        if self.deterministic and self.workers:
            raise ConfigError("concurrent data workers require deterministic=false")
        if not 0 <= self.seed < 2 ** 63:
            raise ConfigError("seed out of range")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self):
        for name in ("model", "data", "loss", "train"):
            try:
                getattr(self, name).validate()
            except (TypeError, ValueError) as e:
                if isinstance(e, ConfigError):
                    raise
                raise ConfigError(f"{name}: {e}") from e
        return self

    def to_dict(self):
        return _plain(asdict(self))

    def hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d):
        return _build(cls, d or {}, "").validate()

    def override(self, assignments):
        """Apply ``section.key=value`` strings; values are parsed as YAML scalars or lists."""
        d = self.to_dict()
        for a in assignments:
            if "=" not in a:
                raise ConfigError(f"override {a!r} is not of the form key=value")
            key, raw = a.split("=", 1)
            node = d
            parts = key.strip().split(".")
            for p in parts[:-1]:
                if not isinstance(node.get(p), dict):
                    raise ConfigError(f"unknown config key {key!r}")
                node = node[p]
            if parts[-1] not in node:
                raise ConfigError(f"unknown config key {key!r}")
            try:
                node[parts[-1]] = yaml.safe_load(raw)
            except yaml.YAMLError as e:
                raise ConfigError(f"cannot parse value for {key!r}: {e}") from e
        return RunConfig.from_dict(d)


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def _build(cls, d, prefix):
    if not isinstance(d, dict):
        raise ConfigError(f"{prefix or 'config'} must be a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = set(d) - set(known)
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(prefix + k for k in unknown)}")
    kw = {}
    for name, value in d.items():
        factory = known[name].default_factory
        default = factory() if factory is not MISSING else None
        if is_dataclass(default) and not isinstance(value, type(default)):
            kw[name] = _build(type(default), value, f"{prefix}{name}.")
        else:
            kw[name] = _coerce(known[name].default, value, prefix + name)
    try:
        obj = cls(**kw)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{prefix or 'config'}: {e}") from e
    return obj


def _coerce(default, value, key):
    """Match scalar values to the type of the field default (YAML reads ``1e-3`` as a string)."""
    try:
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise ValueError("expected true or false")
        elif isinstance(default, int):
            if isinstance(value, bool) or float(value) != int(float(value)):
                raise ValueError("expected an integer")
            value = int(float(value))
        elif isinstance(default, float):
            if isinstance(value, bool):
                raise ValueError("expected a number")
            value = float(value)
        elif isinstance(default, str) and not isinstance(value, str):
            raise ValueError("expected a string")
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{key}: {e} (got {value!r})") from None
    return value


def load_config(path=None, overrides=()):
    d = {}
    if path:
        text = Path(path).read_text()
        try:
            d = yaml.safe_load(text) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}: {e}") from e
    cfg = RunConfig.from_dict(d)
    return cfg.override(overrides) if overrides else cfg


def substream(seed, name):
    """Independent numpy generator for a named purpose (data, init, order, ...)."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


def substream_seed(seed, name):
    return int(substream(seed, name).integers(2 ** 62))
