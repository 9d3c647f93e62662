"""Run configuration: one JSON document drives every pipeline stage.

Parsing is strict: unknown keys anywhere in the document raise
ConfigError naming the offending key and section, so typos cannot
silently fall back to defaults.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .fusion import FusionTrainConfig
from .infer import InferenceConfig
from .percept import Calibration, PerceptTrainConfig
from .textlm import LmConfig, LmTrainConfig


@dataclass
class WorldConfig:
    seed: int = 0
    n_objects: int = 64
    heldout_fraction: float = 0.25
    epsilon_train: float = 0.0


@dataclass
class BudgetConfig:
    repetitions: int = 7
    min_prompts: int = 20
    sample_max_tokens: int = 3
    sample_temperature: float = 1.0


@dataclass
class RunConfig:
    seed: int = 0
    threads: int = 1
    record_timing: bool = True
    out_dir: str | None = None
    world: WorldConfig = field(default_factory=WorldConfig)
    lm_arch: LmConfig = field(default_factory=LmConfig)
    lm_train: LmTrainConfig = field(default_factory=LmTrainConfig)
    percept: PerceptTrainConfig = field(default_factory=PerceptTrainConfig)
    fusion: FusionTrainConfig = field(default_factory=FusionTrainConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    budget: BudgetConfig = field(default_factory=BudgetConfig)
    calibration: Calibration | None = None


_SECTION_TYPES = {
    "world": WorldConfig,
    "lm_arch": LmConfig,
    "lm_train": LmTrainConfig,
    "percept": PerceptTrainConfig,
    "fusion": FusionTrainConfig,
    "inference": InferenceConfig,
    "budget": BudgetConfig,
    "calibration": Calibration,
}


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"section {where!r} must be an object, got {type(data).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown key {unknown[0]!r} in section {where!r}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad values in section {where!r}: {e}") from None


def config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError(f"config root must be an object, got {type(data).__name__}")
    top_names = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(data) - top_names)
    if unknown:
        raise ConfigError(f"unknown key {unknown[0]!r} at config root")
    kwargs = {}
    for key, value in data.items():
        if key in _SECTION_TYPES:
            if key == "calibration" and value is None:
                kwargs[key] = None
            else:
                kwargs[key] = _build(_SECTION_TYPES[key], value, key)
        else:
            kwargs[key] = value
    try:
        return RunConfig(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad top-level config values: {e}") from None


def config_to_dict(cfg: RunConfig) -> dict:
    out = {}
    for f in dataclasses.fields(RunConfig):
        value = getattr(cfg, f.name)
        if dataclasses.is_dataclass(value):
            out[f.name] = dataclasses.asdict(value)
        else:
            out[f.name] = value
    return out


def load_config(path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON: {e}") from None
    return config_from_dict(data)


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(config_to_dict(cfg), indent=2, sort_keys=True) + "\n")
