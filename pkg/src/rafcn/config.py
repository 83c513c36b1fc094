"""Run configuration: one JSON document covering data, network, optimizer and training."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .data import GeneratorConfig
from .errors import ConfigError
from .network import NetworkConfig


@dataclass
class OptimConfig:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay_factor: float = 0.1
    plateau_patience: int = 5
    plateau_threshold: float = 1e-6
    min_lr: float = 1e-7


@dataclass
class TrainConfig:
    batch: int = 5
    max_iters: int = 3000
    eval_every: int = 200
    early_stop_patience: int = 8  # evaluations without val-loss improvement

    def validate(self) -> None:
        if self.batch < 1 or self.max_iters < 1 or self.eval_every < 1 or self.early_stop_patience < 1:
            raise ConfigError("batch, max_iters, eval_every and early_stop_patience must be >= 1")


def _default_network() -> NetworkConfig:
    return NetworkConfig(num_classes=GeneratorConfig().num_classes)


@dataclass
class RunConfig:
    """Everything a command needs. ``seed`` drives data, init and shuffling alike."""

    network: NetworkConfig = field(default_factory=_default_network)
    data: GeneratorConfig = field(default_factory=GeneratorConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    output_dir: str = "runs/default"
    data_dir: str | None = None  # defaults to <output_dir>/data
    seed: int = 0

    def __post_init__(self):
        self.network.seed = self.seed
        self.data.seed = self.seed
        self.validate()

    def validate(self) -> None:
        self.network.validate()
        self.data.validate()
        self.train.validate()
        if self.network.num_classes != self.data.num_classes:
            raise ConfigError(f"network has {self.network.num_classes} classes, data has {self.data.num_classes}")
        if tuple(self.network.tile) != tuple(self.data.tile):
            raise ConfigError(f"network tile {self.network.tile} differs from data tile {self.data.tile}")
        if self.network.in_channels != 3:
            raise ConfigError("synthetic tiles are RGB; network.in_channels must be 3")

    @property
    def dataset_dir(self) -> Path:
        return Path(self.data_dir) if self.data_dir else Path(self.output_dir) / "data"

    def to_dict(self) -> dict:
        return {
            "network": self.network.to_dict(),
            "data": self.data.to_dict(),
            "optim": asdict(self.optim),
            "train": asdict(self.train),
            "output_dir": self.output_dir,
            "data_dir": self.data_dir,
            "seed": self.seed,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kw = dict(d)
        try:
            # partial sections fill in from the run-level defaults
            if "network" in kw:
                kw["network"] = NetworkConfig.from_dict({**_default_network().to_dict(), **kw["network"]})
            if "data" in kw:
                kw["data"] = GeneratorConfig.from_dict({**GeneratorConfig().to_dict(), **kw["data"]})
            if "optim" in kw:
                kw["optim"] = OptimConfig(**{**asdict(OptimConfig()), **kw["optim"]})
            if "train" in kw:
                kw["train"] = TrainConfig(**{**asdict(TrainConfig()), **kw["train"]})
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_dict(raw)

    def replace(self, **changes) -> "RunConfig":
        d = self.to_dict()
        d.update(changes)
        return RunConfig.from_dict(d)
