"""Run configuration and the plain-text ``key = value`` file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .encoders import ModelConfig
from .errors import ConfigError
from .objectives import LossWeights


@dataclass
class RetrievalConfig:
    pool_size: int = 4
    top_k: int = 2
    prompt_len: int = 2
    kmeans_iters: int = 50

    def validate(self, n_patches: int) -> None:
        if self.pool_size < 1 or self.top_k < 1 or self.prompt_len < 1 or self.kmeans_iters < 1:
            raise ConfigError("pool_size, top_k, prompt_len and kmeans_iters must be positive")
        if self.top_k > self.pool_size:
            raise ConfigError(f"top_k={self.top_k} exceeds pool_size={self.pool_size}; unique selection impossible")
        if self.top_k > n_patches:
            raise ConfigError(f"top_k={self.top_k} exceeds the {n_patches} patch tokens available for clustering")


@dataclass
class ScheduleConfig:
    epochs: int = 15
    steps_per_epoch: int = 0  # 0: one pass over the few-shot training set
    base_lr: float = 0.0035
    momentum: float = 0.9
    batch_size: int = 4

    def validate(self) -> None:
        if self.base_lr <= 0:
            raise ConfigError("base_lr must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.epochs < 1 or self.batch_size < 1 or self.steps_per_epoch < 0:
            raise ConfigError("epochs and batch_size must be positive, steps_per_epoch non-negative")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)

    @property
    def seed(self) -> int:
        return self.model.seed

    def validate(self) -> None:
        self.model.validate()
        self.retrieval.validate(self.model.n_patches)
        self.weights.validate()
        self.schedule.validate()

    def replace(self, **overrides) -> "RunConfig":
        """Copy with flat-key overrides, e.g. ``cfg.replace(top_k=3, lambda1=0.0)``."""
        new = dataclasses.replace(
            self,
            model=dataclasses.replace(self.model),
            retrieval=dataclasses.replace(self.retrieval),
            weights=dataclasses.replace(self.weights),
            schedule=dataclasses.replace(self.schedule),
        )
        for key, value in overrides.items():
            section, name, typ = _lookup(key)
            setattr(getattr(new, section), name, typ(value))
        return new

    def to_text(self) -> str:
        lines = []
        for section in _SECTIONS:
            for f in dataclasses.fields(getattr(self, section)):
                lines.append(f"{f.name} = {getattr(getattr(self, section), f.name)!r}")
        return "\n".join(lines) + "\n"


_SECTIONS = ("model", "retrieval", "weights", "schedule")
ALIASES = {"M": "pool_size", "k": "top_k", "L_p": "prompt_len"}


def _lookup(key: str):
    key = ALIASES.get(key, key)
    for section in _SECTIONS:
        for f in dataclasses.fields(_DEFAULTS[section]):
            if f.name == key:
                typ = type(getattr(_DEFAULTS[section], f.name))
                return section, f.name, typ
    raise ConfigError(f"unknown config key {key!r}")


_DEFAULTS = {"model": ModelConfig(), "retrieval": RetrievalConfig(), "weights": LossWeights(), "schedule": ScheduleConfig()}


def _convert(typ, raw: str, key: str):
    try:
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def parse_key_values(text: str) -> dict[str, str]:
    """``key = value`` lines; blank lines and ``#`` comments are skipped, duplicates rejected."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def config_from_text(text: str) -> RunConfig:
    cfg = RunConfig()
    for key, raw in parse_key_values(text).items():
        section, name, typ = _lookup(key)
        setattr(getattr(cfg, section), name, _convert(typ, raw, key))
    cfg.validate()
    return cfg


def load_config(path: str | Path) -> RunConfig:
    return config_from_text(Path(path).read_text())
