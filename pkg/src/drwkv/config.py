"""Run configuration: flat ``section.key = value`` files.

Sections are ``model`` (architecture, plus ``model.preset``), ``schedule``,
``train``, ``sample`` and ``data``; ``seed`` and ``out`` are top-level.
Lines starting with ``#`` are comments.  Every key is checked against the
known fields and unknown keys are an error.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields, replace
from typing import Optional

from .backbone import PRESETS, ConfigError, ModelConfig
from .diffusion import SamplerConfig
from .train import TrainConfig

DATA_SOURCES = ("two_blobs", "cifar10")


@dataclass
class ScheduleConfig:
    beta_start: float = 1e-4
    beta_end: float = 2e-2


@dataclass
class DataConfig:
    source: str = "two_blobs"
    path: str = ""
    n: int = 1000          # two_blobs size
    limit: int = 0         # cifar10 subset size, 0 = all

    def __post_init__(self):
        if self.source not in DATA_SOURCES:
            raise ConfigError(f"data.source must be one of {DATA_SOURCES}")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=lambda: ModelConfig.preset("S", H=8, W=8, C=1, num_classes=2))
    preset: Optional[str] = "S"
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sample: SamplerConfig = field(default_factory=SamplerConfig)
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 0
    out: str = "runs/default"

    def to_text(self) -> str:
        lines = [f"seed = {self.seed}", f"out = {self.out}"]
        if self.preset:
            lines.append(f"model.preset = {self.preset}")
        for section in ("model", "schedule", "train", "sample", "data"):
            obj = getattr(self, section)
            for f in fields(obj):
                v = getattr(obj, f.name)
                lines.append(f"{section}.{f.name} = {'' if v is None else v}")
        return "\n".join(lines) + "\n"


_SECTIONS = {"model": ModelConfig, "schedule": ScheduleConfig, "train": TrainConfig,
             "sample": SamplerConfig, "data": DataConfig}


def _convert(raw: str, typ: str, key: str):
    typ = typ.replace("Optional[", "").rstrip("]")
    try:
        if typ == "bool":
            if raw.lower() not in ("true", "false", "1", "0"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1")
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {raw!r} as {typ}") from None
    return raw


def parse_run_config(text: str) -> RunConfig:
    values: dict[str, dict] = {s: {} for s in _SECTIONS}
    top: dict = {}
    preset = None
    for n, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value")
        key, _, raw = (s.strip() for s in line.partition("="))
        if key == "model.preset":
            if raw and raw not in PRESETS:
                raise ConfigError(f"unknown preset {raw!r}; choose from {sorted(PRESETS)}")
            preset = raw or None
            continue
        if key in ("seed", "out"):
            top[key] = int(raw) if key == "seed" else raw
            continue
        section, _, name = key.partition(".")
        if section not in _SECTIONS:
            raise ConfigError(f"line {n}: unknown key {key!r}")
        known = {f.name: f.type for f in fields(_SECTIONS[section])}
        if name not in known:
            raise ConfigError(f"line {n}: unknown key {key!r}")
        if raw == "" and "Optional" in str(known[name]):
            values[section][name] = None
        else:
            values[section][name] = _convert(raw, str(known[name]), key)
    base = RunConfig()
    if preset:
        L, D, E, _ = PRESETS[preset]
        model = replace(base.model, **{"L": L, "D": D, "E": E, **values["model"]})
    else:
        model = replace(base.model, **values["model"])
    cfg = RunConfig(
        model=model, preset=preset,
        schedule=replace(base.schedule, **values["schedule"]),
        train=replace(base.train, **values["train"]),
        sample=replace(base.sample, **values["sample"]),
        data=replace(base.data, **values["data"]),
        **top,
    )
    if cfg.train.steps < 1 or cfg.train.batch_size < 1:
        raise ConfigError("train.steps and train.batch_size must be positive")
    if not 0 < cfg.schedule.beta_start < cfg.schedule.beta_end < 1:
        raise ConfigError("need 0 < schedule.beta_start < schedule.beta_end < 1")
    return cfg


def load_run_config(path: str) -> RunConfig:
    if not os.path.exists(path):
        raise ConfigError(f"config file {path} does not exist")
    with open(path) as f:
        return parse_run_config(f.read())
