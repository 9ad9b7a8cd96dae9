"""Pipeline configuration: one JSON file with per-stage sections, loaded
into typed dataclasses, plus dotted-key command-line overrides and named
seed sub-streams so partial re-runs stay reproducible.
"""

from __future__ import annotations

import dataclasses
import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .patternlm import LmConfig
from .rqvae import RqvaeConfig

__all__ = [
    "CityConfig",
    "SimulationConfig",
    "RqvaeTrainConfig",
    "LmTrainConfig",
    "MetricsSection",
    "PipelineConfig",
    "ConfigError",
    "sub_seed",
]


class ConfigError(ValueError):
    pass


@dataclass
class CityConfig:
    rows: int = 20
    cols: int = 20
    spacing_m: float = 450.0
    jitter_frac: float = 0.1


@dataclass
class SimulationConfig:
    num_trajectories: int = 2000
    interval_s: float = 10.0
    base_speed_mps: float = 12.0
    speed_spread: float = 0.25  # uniform multiplicative spread around base
    gps_noise_m: float = 6.0
    congestion_factor_lo: float = 0.4
    congestion_factor_hi: float = 0.8
    train_frac: float = 0.9


@dataclass
class RqvaeTrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 0.01
    percent_weight: float = 1.0


@dataclass
class LmTrainConfig:
    epochs: int = 25
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.01
    temperature: float = 1.0
    top_k: int = 50
    max_tokens: int = 128


@dataclass
class MetricsSection:
    bins: int = 50
    top_k: int = 100
    cell_m: float = 100.0


@dataclass
class PipelineConfig:
    seed: int = 0
    workdir: str = "runs/default"
    city: CityConfig = field(default_factory=CityConfig)
    simulation: SimulationConfig = field(default_factory=SimulationConfig)
    rqvae: RqvaeConfig = field(default_factory=RqvaeConfig)
    rqvae_train: RqvaeTrainConfig = field(default_factory=RqvaeTrainConfig)
    lm: LmConfig = field(default_factory=LmConfig)
    lm_train: LmTrainConfig = field(default_factory=LmTrainConfig)
    metrics: MetricsSection = field(default_factory=MetricsSection)

    # -- paths derived from workdir -------------------------------------------

    def path(self, name: str) -> Path:
        return Path(self.workdir) / name

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, doc: dict) -> "PipelineConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        kwargs: dict = {}
        for f in dataclasses.fields(cls):
            if f.name not in doc:
                continue
            val = doc[f.name]
            if dataclasses.is_dataclass(f.type) or f.name in _SECTIONS:
                kwargs[f.name] = _section_from(_SECTIONS[f.name], val, f.name)
            else:
                kwargs[f.name] = val
        return cls(**kwargs)

    @classmethod
    def load(cls, path: str | Path) -> "PipelineConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        return cls.from_json(doc)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")

    def apply_override(self, dotted: str) -> None:
        """Apply one ``section.key=value`` (or ``key=value``) override."""
        if "=" not in dotted:
            raise ConfigError(f"override {dotted!r} must look like key=value")
        key, _, raw = dotted.partition("=")
        parts = key.split(".")
        target: object = self
        for p in parts[:-1]:
            if not hasattr(target, p):
                raise ConfigError(f"unknown config section {p!r} in override {dotted!r}")
            target = getattr(target, p)
        leaf = parts[-1]
        if not hasattr(target, leaf):
            raise ConfigError(f"unknown config key {key!r}")
        current = getattr(target, leaf)
        try:
            value = _parse_like(raw, current)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}") from exc
        if dataclasses.is_dataclass(target) and getattr(type(target), "__dataclass_params__").frozen:
            # frozen sections (model configs) are replaced wholesale
            replaced = dataclasses.replace(target, **{leaf: value})
            owner_name = parts[-2] if len(parts) > 1 else None
            if owner_name is None:
                raise ConfigError(f"cannot override frozen top-level key {key!r}")
            setattr(self, owner_name, replaced)
        else:
            setattr(target, leaf, value)


_SECTIONS = {
    "city": CityConfig,
    "simulation": SimulationConfig,
    "rqvae": RqvaeConfig,
    "rqvae_train": RqvaeTrainConfig,
    "lm": LmConfig,
    "lm_train": LmTrainConfig,
    "metrics": MetricsSection,
}


def _section_from(cls, doc: dict, name: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown keys in section {name!r}: {sorted(unknown)}")
    fixed = dict(doc)
    for f in dataclasses.fields(cls):
        if f.name in fixed and isinstance(fixed[f.name], list):
            fixed[f.name] = tuple(fixed[f.name])
    return cls(**fixed)


def _parse_like(raw: str, current) -> object:
    if isinstance(current, bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, tuple):
        return tuple(int(x) for x in raw.split(","))
    return raw


def sub_seed(root: int, name: str) -> int:
    """Deterministic per-stream seed derived from the root seed and a name."""
    ss = np.random.SeedSequence([int(root), zlib.crc32(name.encode())])
    return int(ss.generate_state(1)[0])
