"""Run configuration: versioned JSON, strict keys, validated before any compute."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from mtnas.errors import ArgumentError, ConfigError
from mtnas.evolution import EvoSettings
from mtnas.search_space import MODES, get_preset
from mtnas.tasks import default_tasks
from mtnas.training import TrainSettings

CONFIG_VERSION = 1


@dataclass(frozen=True)
class DataConfig:
    n_scenes: int = 92
    seed: int = 0


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5
    batch_size: int = 8
    lr: float = 2e-3
    lr_min: float = 2e-5
    weight_decay: float = 0.05
    warmup_epochs: float = 1.0
    arch_lr: float = 0.2
    tau0: float = 5.0
    tau_min: float = 0.1
    sampling: str = "gumbel"


@dataclass(frozen=True)
class EvoConfig:
    population: int = 16
    generations: int = 6
    parents: int = 4
    p_mut_layer: float = 0.4
    p_mut_block: float = 0.2


@dataclass(frozen=True)
class RunConfig:
    version: int = CONFIG_VERSION
    mode: str = "single"
    preset: str = "desk"
    tasks: tuple[str, ...] = ("autoencode", "edge", "seg", "count")
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    evo: EvoConfig = field(default_factory=EvoConfig)
    budgets: tuple[int, ...] = (100_000, 200_000)
    random_baseline: bool = True
    output_dir: str = "run"

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["tasks"] = list(self.tasks)
        d["budgets"] = list(self.budgets)
        return d

    @property
    def hash(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def train_settings(self, seed: int | None = None) -> TrainSettings:
        return TrainSettings(**dataclasses.asdict(self.train), seed=self.seed if seed is None else seed)

    def evo_settings(self, constraint: int | None, seed: int | None = None) -> EvoSettings:
        return EvoSettings(**dataclasses.asdict(self.evo), constraint=constraint,
                           seed=self.seed if seed is None else seed)

    def with_overrides(self, seed: int | None = None, budgets=None) -> "RunConfig":
        cfg = self
        if seed is not None:
            cfg = dataclasses.replace(cfg, seed=int(seed))
        if budgets:
            cfg = dataclasses.replace(cfg, budgets=tuple(int(b) for b in budgets))
        validate(cfg)
        return cfg


def _build(cls, raw: Mapping[str, Any], where: str):
    if not isinstance(raw, Mapping):
        raise ConfigError(f"{where}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kw = {}
    for name, value in raw.items():
        default = getattr(cls(), name)
        if dataclasses.is_dataclass(default):
            kw[name] = _build(type(default), value, f"{where}.{name}")
        elif isinstance(default, tuple):
            if not isinstance(value, list):
                raise ConfigError(f"{where}.{name}: expected a list")
            kw[name] = tuple(value)
        elif isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{where}.{name}: expected true/false")
            kw[name] = value
        elif isinstance(default, (int, float)):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{where}.{name}: expected a number")
            if isinstance(default, int) and value != int(value):
                raise ConfigError(f"{where}.{name}: expected an integer")
            kw[name] = type(default)(value)
        else:
            if not isinstance(value, str):
                raise ConfigError(f"{where}.{name}: expected a string")
            kw[name] = value
    return cls(**kw)


def validate(cfg: RunConfig) -> None:
    if cfg.version != CONFIG_VERSION:
        raise ConfigError(f"config version {cfg.version} is not supported (expected {CONFIG_VERSION})")
    if cfg.mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {cfg.mode!r}")
    space = get_preset(cfg.preset)
    if space.counting_only:
        raise ConfigError(f"preset {cfg.preset!r} is for parameter counting only and cannot be trained")
    known = [t.id for t in default_tasks()]
    bad = [t for t in cfg.tasks if t not in known]
    if bad or not cfg.tasks or len(set(cfg.tasks)) != len(cfg.tasks):
        raise ConfigError(f"tasks must be distinct ids from {known}, got {list(cfg.tasks)}")
    if not cfg.budgets or any(int(b) <= 0 for b in cfg.budgets):
        raise ConfigError("budgets must be a non-empty list of positive parameter counts")
    if cfg.data.n_scenes < 10:
        raise ConfigError("data.n_scenes must be at least 10 so every split is non-empty")
    if not cfg.output_dir:
        raise ConfigError("output_dir must be non-empty")
    try:
        cfg.train_settings()
        cfg.evo_settings(None)
    except ArgumentError as exc:
        raise ConfigError(str(exc)) from exc


def parse_config(raw: Mapping[str, Any]) -> RunConfig:
    cfg = _build(RunConfig, raw, "config")
    validate(cfg)
    return cfg


def load_config(path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return parse_config(raw)
