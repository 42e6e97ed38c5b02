"""Nested run configuration loaded from YAML, with strict key checking."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import platform
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np
import torch
import yaml

from .critic import CriticConfig
from .dataio import AugmentConfig, FrameSampleConfig
from .objective import ObjectiveConfig
from .rl import RLConfig
from .trainer import TrainConfig

__version__ = "0.1.0"


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    successes_per_task: int = 40
    failures_per_task: int = 27
    corrupt_p: float = 0.7
    heldout_every: int = 5
    # extra validation episodes per training task, as a fraction of the counts above
    val_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie in [0, 1)")
        if self.successes_per_task < 0 or self.failures_per_task < 0:
            raise ConfigError("episode counts must be non-negative")
        if not 0.0 <= self.corrupt_p <= 1.0:
            raise ConfigError("corrupt_p must lie in [0, 1]")


@dataclass
class EvalConfig:
    groups_per_task: int = 50
    k_failures: int = 5
    perturbations: list = field(default_factory=lambda: [[1.0, 0.0], [0.5, 0.2]])
    seed: int = 0
    curve_episodes: int = 4


@dataclass
class IOConfig:
    root: str = "runs"
    log_level: str = "INFO"


@dataclass
class RunConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    critic: CriticConfig = field(default_factory=CriticConfig)
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    trainer: TrainConfig = field(default_factory=TrainConfig)
    rl: RLConfig = field(default_factory=RLConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    io: IOConfig = field(default_factory=IOConfig)

    def __post_init__(self):
        # the objective section is authoritative for the trainer
        self.trainer.objective = self.objective
        self.trainer.__post_init__()

    def to_dict(self) -> dict:
        d = _to_plain(self)
        d["trainer"].pop("objective", None)
        return d

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def provenance(self) -> dict:
        return {"config_hash": self.hash(), "seed": self.seed, "versions": module_versions()}


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    return obj


_NESTED = {
    (TrainConfig, "objective"): ObjectiveConfig,
    (TrainConfig, "sampling"): FrameSampleConfig,
    (TrainConfig, "eval_sampling"): FrameSampleConfig,
    (TrainConfig, "augment"): AugmentConfig,
}


def _build(cls, data: Any, where: str):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for key, value in data.items():
        sub = _SECTIONS.get(key) if cls is RunConfig else _NESTED.get((cls, key))
        kwargs[key] = _build(sub, value, f"{where}.{key}") if sub else value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


_SECTIONS = {"data": DataConfig, "critic": CriticConfig, "objective": ObjectiveConfig,
             "trainer": TrainConfig, "rl": RLConfig, "eval": EvalConfig, "io": IOConfig}


_SEEDED = ("data", "trainer", "rl", "eval")


def from_dict(data: Optional[dict]) -> RunConfig:
    """Build a :class:`RunConfig`; sections without their own ``seed`` inherit
    the global one."""
    data = dict(data or {})
    if isinstance(data.get("trainer"), dict) and "objective" in data["trainer"]:
        raise ConfigError("config.trainer: set the objective in the top-level objective section")
    cfg = _build(RunConfig, data, "config")
    for name in _SEEDED:
        section = data.get(name)
        if not (isinstance(section, dict) and "seed" in section):
            getattr(cfg, name).seed = cfg.seed
    return cfg


def load_config(path=None, overrides: Optional[list] = None) -> RunConfig:
    """Read a YAML config (defaults when ``path`` is None) and apply
    ``section.key=value`` overrides."""
    data: dict = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        with open(p, encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or {}
    for ov in overrides or []:
        apply_override(data, ov)
    return from_dict(data)


def apply_override(data: dict, override: str) -> dict:
    if "=" not in override:
        raise ConfigError(f"override must look like section.key=value: {override!r}")
    key, raw = override.split("=", 1)
    parts = key.strip().split(".")
    node = data
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot override inside non-mapping at {key}")
    node[parts[-1]] = yaml.safe_load(raw)
    return data


def module_versions() -> dict:
    return {"vlcritic": __version__, "torch": torch.__version__, "numpy": np.__version__,
            "python": platform.python_version()}
