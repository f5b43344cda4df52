"""Run configuration: network + loss + optimiser + data, serialised as TOML."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import tomli
import tomli_w

from .dataio import SynthConfig
from .errors import ConfigError
from .loss import LossConfig
from .roadnet import NetworkConfig


@dataclass
class OptimConfig:
    lr: float = 0.01
    momentum: float = 0.9
    poly_power: float = 0.9
    batch_size: int = 4
    epochs: int = 200
    augment: bool = True
    # stop once val IoU reaches this value (0 disables)
    target_iou: float = 0.0

    def __post_init__(self):
        if self.lr <= 0 or not 0 <= self.momentum < 1:
            raise ConfigError("lr must be positive and momentum in [0, 1)")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (batch norm needs a population)")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")


@dataclass
class DataConfig:
    # directory holding manifest.tsv; empty means generate ``count`` samples from [synth]
    dir: str = ""
    count: int = 250


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    threshold: float = 0.5
    network: NetworkConfig = field(default_factory=NetworkConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: DataConfig = field(default_factory=DataConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)

    def to_dict(self) -> dict:
        def plain(obj):
            d = {}
            for f in dataclasses.fields(obj):
                v = getattr(obj, f.name)
                d[f.name] = list(v) if isinstance(v, tuple) else v
            return d

        out = {"seed": self.seed, "out_dir": self.out_dir, "threshold": self.threshold}
        for section in _SECTIONS:
            out[section] = plain(getattr(self, section))
        return out

    def dumps(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())


_SECTIONS = {
    "network": NetworkConfig,
    "loss": LossConfig,
    "optim": OptimConfig,
    "data": DataConfig,
    "synth": SynthConfig,
}
_TOP = {"seed", "out_dir", "threshold"}


def _build(cls, section: str, values: dict):
    if not isinstance(values, dict):
        raise ConfigError(f"[{section}] must be a table")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"[{section}]: {exc}") from None


def from_dict(d: dict) -> RunConfig:
    unknown = sorted(set(d) - _TOP - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    kw = {k: d[k] for k in _TOP if k in d}
    for name, cls in _SECTIONS.items():
        kw[name] = _build(cls, name, d.get(name, {}))
    return RunConfig(**kw)


def loads(text: str) -> RunConfig:
    try:
        return from_dict(tomli.loads(text))
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"config is not valid TOML: {exc}") from None


def load(path) -> RunConfig:
    return loads(Path(path).read_text())
