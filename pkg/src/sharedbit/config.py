"""Run configuration loaded from JSON, with the published hyper-parameters as defaults."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from typing import Any, Optional, Union

from .search import SearchConfig
from .supernet import REFERENCE_TOPOLOGIES, BitSpace, SamplerConfig, Topology


class ConfigError(ValueError):
    pass


@dataclass
class BitsConfig:
    weight: list[int] = field(default_factory=lambda: [2, 3, 4, 5, 6])
    activation: list[int] = field(default_factory=lambda: [2, 3, 4, 5, 6])
    fix_ends: bool = True


@dataclass
class OptimConfig:
    lr: float = 0.04
    momentum: float = 0.9
    weight_decay: float = 2.5e-5
    warmup_epochs: int = 5
    epochs: int = 10
    batch_size: int = 64
    fairness: bool = True


@dataclass
class ScheduleSettings:
    enabled: bool = True
    k0: Optional[int] = None  # default ceil(searchable layers / 2)
    period_epochs: float = 1.0
    duration_epochs: float = 1.0
    epsilon: float = 0.25
    mode: str = "bound"


@dataclass
class IDMSettings:
    enabled: bool = True
    weight: float = 0.1
    q: float = 0.0
    eps: float = 1e-5


@dataclass
class SearchSettings:
    lam: float = 1.5
    budget: Optional[float] = None
    budget_bits: Optional[float] = None  # budget = BitOps of the uniform policy at this many bits
    max_steps: int = 100
    val_size: int = 2000
    calib_batches: int = 8
    calib_batch_size: int = 64
    recalibrate: bool = True
    coupled: bool = True
    revisit: bool = True


@dataclass
class RunConfig:
    model: Union[str, dict] = "cnn4"
    bits: BitsConfig = field(default_factory=BitsConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    optimizer: OptimConfig = field(default_factory=OptimConfig)
    schedule: ScheduleSettings = field(default_factory=ScheduleSettings)
    idm: IDMSettings = field(default_factory=IDMSettings)
    search: SearchSettings = field(default_factory=SearchSettings)
    data: dict = field(default_factory=lambda: {"kind": "mnist5k"})
    seed: int = 0
    out: str = "runs/default"
    base_dir: str = field(default=".", repr=False)

    # ------------------------------------------------------------------
    def topology(self) -> Topology:
        cfg = REFERENCE_TOPOLOGIES.get(self.model) if isinstance(self.model, str) else self.model
        if cfg is None:
            raise ConfigError(f"unknown reference model {self.model!r}; known: {sorted(REFERENCE_TOPOLOGIES)}")
        try:
            return Topology.from_dict(cfg)
        except (KeyError, TypeError, ValueError) as err:
            raise ConfigError(f"invalid model topology: {err}") from None

    def space(self) -> BitSpace:
        return BitSpace.uniform(len(self.topology()), self.bits.weight, self.bits.activation, self.bits.fix_ends)

    def search_config(self, budget: float, workers: int = 1) -> SearchConfig:
        s = self.search
        return SearchConfig(s.lam, budget, s.max_steps, s.val_size, s.calib_batches, s.calib_batch_size, s.recalibrate, s.coupled, workers, s.revisit)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("base_dir")
        return d

    def validate(self) -> "RunConfig":
        for name, bits in (("weight", self.bits.weight), ("activation", self.bits.activation)):
            if not bits:
                raise ConfigError(f"bits.{name} must be non-empty")
            if any(int(b) < 2 for b in bits):
                raise ConfigError(f"bits.{name} candidates must be >= 2")
            if len(set(bits)) != len(bits):
                raise ConfigError(f"bits.{name} has duplicates")
        self.bits.weight = sorted(int(b) for b in self.bits.weight)
        self.bits.activation = sorted(int(b) for b in self.bits.activation)
        o = self.optimizer
        if o.lr <= 0 or o.epochs < 1 or o.batch_size < 1 or o.warmup_epochs < 0:
            raise ConfigError("optimizer: lr > 0, epochs >= 1, batch_size >= 1, warmup_epochs >= 0 required")
        if not 0.0 <= self.schedule.epsilon <= 1.0:
            raise ConfigError("schedule.epsilon must lie in [0, 1]")
        if self.schedule.mode not in ("bound", "literal"):
            raise ConfigError("schedule.mode must be 'bound' or 'literal'")
        if self.idm.eps <= 0 or self.idm.weight < 0:
            raise ConfigError("idm.eps must be > 0 and idm.weight >= 0")
        if self.search.lam < 0:
            raise ConfigError("search.lam must be >= 0")
        if self.data.get("kind") == "idx":
            for key in ("train_images", "train_labels", "test_images", "test_labels"):
                p = os.path.join(self.base_dir, self.data.get(key, ""))
                if not os.path.isfile(p):
                    raise ConfigError(f"data.{key}: file {p!r} does not exist")
        self.topology()
        return self


def _build(cls, raw: Any, where: str):
    if isinstance(raw, cls):
        return raw
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - names
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{where}: {err}") from None


def config_from_dict(raw: dict, base_dir: str = ".") -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    sections = {
        "bits": BitsConfig,
        "sampler": SamplerConfig,
        "optimizer": OptimConfig,
        "schedule": ScheduleSettings,
        "idm": IDMSettings,
        "search": SearchSettings,
    }
    kwargs = {}
    for key, value in raw.items():
        if key in sections:
            kwargs[key] = _build(sections[key], value, key)
        elif key in ("model", "data", "seed", "out"):
            kwargs[key] = value
        else:
            raise ConfigError(f"unknown config key {key!r}")
    cfg = RunConfig(**kwargs, base_dir=base_dir)
    try:
        cfg.seed = int(cfg.seed)
    except (TypeError, ValueError):
        raise ConfigError("seed must be an integer") from None
    return cfg.validate()


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file {path!r} not found") from None
    except json.JSONDecodeError as err:
        raise ConfigError(f"config file {path!r} is not valid JSON: {err}") from None
    return config_from_dict(raw, os.path.dirname(os.path.abspath(path)))
