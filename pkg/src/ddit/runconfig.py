"""Run configuration: named presets, INI config files, flag overrides.

Precedence (low to high): preset values, config-file values, explicit CLI
overrides.  Unknown sections or keys are rejected.  The effective
configuration can be echoed back out as an INI file.
"""

from __future__ import annotations

import configparser
import types
import typing
from dataclasses import dataclass, fields

from .dit_core import ModelConfig
from .errors import ConfigError, PersistenceError
from .latentcodec import CodecConfig
from .samplers import SamplerConfig
from .trainer import TrainConfig


@dataclass(frozen=True)
class DataConfig:
    size: int = 32

    def __post_init__(self):
        if self.size < 1:
            raise ConfigError(f"size must be positive, got {self.size}")


SECTION_TYPES = {
    "model": ModelConfig,
    "codec": CodecConfig,
    "train": TrainConfig,
    "sampler": SamplerConfig,
    "data": DataConfig,
}

PRESETS: dict[str, dict[str, dict]] = {
    # Small profile exercised end to end on 32px scenes.  Patch 1 keeps the
    # prediction head full-rank over the 48-channel latent (64 tokens of
    # width 128 cover all 3072 latent scalars); patch 2 at this width
    # cannot represent the noise target and reverse trajectories diverge.
    "toy": {
        "model": {
            "hidden": 128, "depth": 4, "heads": 4, "patch": 1,
            "latent_channels": 48, "text_dim": 64, "text_len_max": 8,
            "vocab_size": 16, "freq_dim": 256,
        },
        "codec": {"kind": "haar", "levels": 2, "scaling": 1.0},
        "train": {
            "objective": "ddpm", "max_steps": 2000, "batch_size": 32,
            "base_lr": 2e-3, "warmup_steps": 100, "ema_decay": 0.995,
            "cond_dropout": 0.05, "max_grad_norm": 0.5, "weight_decay": 0.01,
        },
        "sampler": {"kind": "ddim", "steps": 50, "eta": 0.0},
        "data": {"size": 32},
    },
    # Full-scale structural profile; used for inspection and parameter
    # accounting, far beyond desk-scale training budgets.
    "paper-profile": {
        "model": {
            "hidden": 1152, "depth": 28, "heads": 16, "patch": 2,
            "latent_channels": 16, "text_dim": 1024, "text_len_max": 77,
            "vocab_size": 16, "freq_dim": 256, "rope_base": 10000.0,
        },
        "codec": {"kind": "haar", "levels": 2, "scaling": 1.0},
        "train": {
            "objective": "ddpm", "base_lr": 1e-4, "warmup_steps": 200,
            "batch_size": 32, "ema_decay": 0.9999, "cond_dropout": 0.05,
            "max_grad_norm": 0.5, "weight_decay": 0.01,
        },
        "sampler": {"kind": "ddim", "steps": 50, "eta": 0.0},
        "data": {"size": 64},
    },
}


@dataclass
class RunSettings:
    model: ModelConfig
    codec: CodecConfig
    train: TrainConfig
    sampler: SamplerConfig
    data: DataConfig


def _convert(raw: str, annotation) -> object:
    origin = typing.get_origin(annotation)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(annotation) if a is not type(None)]
        if raw.strip().lower() in ("none", ""):
            return None
        return _convert(raw, args[0])
    if origin is tuple:
        items = [part.strip() for part in raw.split(",")]
        elem_types = typing.get_args(annotation)
        return tuple(_convert(item, t) for item, t in zip(items, elem_types))
    if annotation is bool:
        lowered = raw.strip().lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"cannot parse boolean from {raw!r}")
    if annotation is int:
        return int(raw)
    if annotation is float:
        return float(raw)
    if annotation is str:
        return raw.strip()
    raise ConfigError(f"unsupported config value type {annotation}")


def load_ini(path) -> dict[str, dict[str, str]]:
    parser = configparser.ConfigParser()
    try:
        with open(path) as f:
            parser.read_file(f)
    except OSError as exc:
        raise PersistenceError(f"cannot read config file {path}: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"malformed config file {path}: {exc}") from exc
    out = {}
    for section in parser.sections():
        if section not in SECTION_TYPES:
            raise ConfigError(f"unknown config section [{section}]")
        out[section] = dict(parser.items(section))
    return out


def build_settings(
    preset: str | None = None,
    config_file=None,
    overrides: dict[str, dict] | None = None,
) -> RunSettings:
    """Merge preset, file, and override layers into validated configs."""
    merged: dict[str, dict] = {name: {} for name in SECTION_TYPES}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        for section, values in PRESETS[preset].items():
            merged[section].update(values)

    if config_file is not None:
        for section, values in load_ini(config_file).items():
            cls = SECTION_TYPES[section]
            hints = typing.get_type_hints(cls)
            known = {f.name for f in fields(cls)}
            for key, raw in values.items():
                if key not in known:
                    raise ConfigError(f"unknown key {key!r} in section [{section}]")
                merged[section][key] = _convert(raw, hints[key])

    for section, values in (overrides or {}).items():
        if section not in SECTION_TYPES:
            raise ConfigError(f"unknown config section [{section}]")
        known = {f.name for f in fields(SECTION_TYPES[section])}
        for key, value in values.items():
            if key not in known:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            if value is not None:
                merged[section][key] = value

    return RunSettings(
        model=ModelConfig(**merged["model"]),
        codec=CodecConfig(**merged["codec"]),
        train=TrainConfig(**merged["train"]),
        sampler=SamplerConfig(**merged["sampler"]),
        data=DataConfig(**merged["data"]),
    )


def write_effective_ini(path, settings: RunSettings) -> None:
    """Echo every effective value so a run directory records its exact configs."""
    parser = configparser.ConfigParser()
    for section, cls in SECTION_TYPES.items():
        cfg = getattr(settings, section)
        parser[section] = {}
        for f in fields(cls):
            value = getattr(cfg, f.name)
            if isinstance(value, tuple):
                value = ", ".join(str(v) for v in value)
            parser[section][f.name] = str(value)
    try:
        with open(path, "w") as f:
            parser.write(f)
    except OSError as exc:
        raise PersistenceError(f"cannot write effective config {path}: {exc}") from exc
