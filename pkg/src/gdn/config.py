"""Strict JSON run configuration.

Unknown keys are rejected with their dotted path, omitted keys take defaults
and :func:`dump_config` is canonical (sorted keys, fixed indentation), so
save -> load -> save is byte-stable.
"""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .diffusion import SamplerConfig
from .guidance import GuidanceConfig
from .model import DenoiserConfig
from .scene import SceneSpec

SCHEMA_VERSION = 1
DATA_DIR_ENV = "GDN_DATA_DIR"


class ConfigError(ValueError):
    pass


@dataclass
class ScheduleConfig:
    N: int = 100
    s: float = 0.008

    def __post_init__(self):
        if self.N < 2:
            raise ValueError("N must be >= 2")
        if self.s <= 0:
            raise ValueError("s must be > 0")


@dataclass
class DataConfig:
    dir: str = "data"
    n_scenes: int = 50
    scene: SceneSpec = field(default_factory=SceneSpec)

    def __post_init__(self):
        if self.n_scenes < 1:
            raise ValueError("n_scenes must be >= 1")


@dataclass
class TrainConfig:
    lr: float = 3e-4
    lr_schedule: str = "constant"  # or "cosine": anneal lr -> lr_final over `steps`
    lr_final: float = 1e-5
    scenes_per_batch: int = 8
    grasps_per_scene: int = 16
    steps: int = 2000
    max_epochs: int = 0  # 0: no cap beyond `steps`
    checkpoint_every: int = 500  # steps
    wall_budget_s: float = 0.0  # 0: unlimited
    log_every: int = 10

    def __post_init__(self):
        if self.lr <= 0 or self.lr_final < 0:
            raise ValueError("lr must be > 0 and lr_final >= 0")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"lr_schedule must be 'constant' or 'cosine', got {self.lr_schedule!r}")
        if self.scenes_per_batch < 1 or self.grasps_per_scene < 1:
            raise ValueError("batch shape must be positive")
        if self.steps < 0 or self.max_epochs < 0 or self.checkpoint_every < 1 or self.log_every < 1:
            raise ValueError("steps/max_epochs >= 0, checkpoint_every/log_every >= 1")


@dataclass
class EvalConfig:
    n_samples: int = 100
    rotation_weight: float = 0.1
    n_scenes: int = 10
    gt_samples: int = 100

    def __post_init__(self):
        if self.n_samples < 1 or self.n_scenes < 1 or self.gt_samples < 1:
            raise ValueError("sample and scene counts must be >= 1")
        if self.rotation_weight < 0:
            raise ValueError("rotation_weight must be >= 0")


@dataclass
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    model: DenoiserConfig = field(default_factory=DenoiserConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    base_dir: str = field(default="", metadata={"persist": False})

    def data_dir(self):
        """Dataset root: $GDN_DATA_DIR if set, else ``data.dir`` relative to the config file."""
        env = os.environ.get(DATA_DIR_ENV)
        if env:
            return Path(env)
        p = Path(self.data.dir)
        return p if p.is_absolute() or not self.base_dir else Path(self.base_dir) / p


def _convert(value, default, path):
    if dataclasses.is_dataclass(default):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected an object")
        return _build(type(default), value, path)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if isinstance(default, (list, tuple)):
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list")
        proto = default[0] if default else value[0] if value else None
        items = [_convert(v, proto, f"{path}[{i}]") if proto is not None else v for i, v in enumerate(value)]
        return type(default)(items)
    raise ConfigError(f"{path}: unsupported field type")


def _build(cls, data, path=""):
    proto = cls()
    names = {f.name for f in dataclasses.fields(cls) if f.metadata.get("persist", True)}
    for key in data:
        if key not in names:
            raise ConfigError(f"unknown field {(path + '.' if path else '') + key!r}")
    kwargs = {}
    for name in names:
        sub = f"{path}.{name}" if path else name
        if name in data:
            kwargs[name] = _convert(data[name], getattr(proto, name), sub)
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


def config_from_dict(data, base_dir=""):
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    if "schema_version" not in data:
        raise ConfigError("missing field 'schema_version'")
    if data["schema_version"] != SCHEMA_VERSION:
        raise ConfigError(f"schema_version {data['schema_version']!r} not supported (expected {SCHEMA_VERSION})")
    cfg = _build(RunConfig, data)
    cfg.base_dir = str(base_dir)
    return cfg


def config_to_dict(cfg):
    def conv(obj):
        if dataclasses.is_dataclass(obj):
            return {f.name: conv(getattr(obj, f.name)) for f in dataclasses.fields(obj) if f.metadata.get("persist", True)}
        if isinstance(obj, (list, tuple)):
            return [conv(v) for v in obj]
        return obj

    return conv(cfg)


def dump_config(cfg):
    return json.dumps(config_to_dict(cfg), sort_keys=True, indent=2) + "\n"


def load_config(path):
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(data, base_dir=path.resolve().parent)


def save_config(cfg, path):
    from .persistence import atomic_write

    atomic_write(path, dump_config(cfg).encode())
