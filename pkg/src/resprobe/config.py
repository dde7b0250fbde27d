"""Experiment configuration as one nested YAML document.

Unknown keys are errors at every level, so a misspelt probe or option
cannot be silently ignored.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .nn import ArchitectureConfig
from .share_unroll import SharingSpec, UnrollSpec
from .train import TrainConfig

PROBE_NAMES = ("cosine_loss", "l2_ratio", "drop_accuracy", "intermediate_accuracy")
DATA_SOURCES = ("synthetic", "cifar10", "cifar100", "idx")
SPLITS = ("train", "val", "test")


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    source: str = "synthetic"
    path: str | None = None  # CIFAR directory, or IDX training images
    val_path: str | None = None  # IDX held-out images
    subset_size: int | None = None  # class-balanced training subset
    val_subset_size: int | None = None
    seed: int = 0
    # synthetic clusters
    n_per_class: int = 50
    class_count: int = 10
    image_shape: tuple = (1, 8, 8)
    separation: float = 3.0

    def __post_init__(self):
        self.image_shape = tuple(int(v) for v in self.image_shape)

    def validate(self) -> None:
        if self.source not in DATA_SOURCES:
            raise ConfigError(f"unknown data source {self.source!r}; expected one of {DATA_SOURCES}")
        if self.source != "synthetic" and not self.path:
            raise ConfigError(f"data source {self.source} needs a path")
        if self.source == "idx" and not self.val_path:
            raise ConfigError("idx data needs val_path for the held-out split")
        if self.source == "synthetic" and self.separation <= 0:
            raise ConfigError("synthetic separation must be positive")


@dataclass
class ProbeSchedule:
    name: str
    every: int = 1  # epochs between measurements

    def validate(self) -> None:
        if self.name not in PROBE_NAMES:
            raise ConfigError(f"unknown probe {self.name!r}; expected one of {PROBE_NAMES}")
        if self.every < 1:
            raise ConfigError("probe cadence must be at least 1 epoch")


@dataclass
class ExperimentConfig:
    run_id: str = "run"
    output_dir: str | None = None
    architecture: ArchitectureConfig = field(default_factory=ArchitectureConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    sharing: SharingSpec | None = None
    unroll: UnrollSpec | None = None
    probes: list = field(default_factory=list)
    probe_split: str = "train"
    batch_size_eval: int = 256
    tau: float = 0.1

    def validate(self) -> None:
        if not self.run_id or any(c in self.run_id for c in "/\\"):
            raise ConfigError(f"invalid run_id {self.run_id!r}")
        try:
            self.architecture.validate()
            self.train.validate()
            if self.sharing is not None:
                self.sharing.validate(self.architecture)
            if self.unroll is not None:
                self.unroll.validate()
        except ValueError as e:
            raise ConfigError(str(e)) from None
        self.data.validate()
        for p in self.probes:
            p.validate()
        if self.probe_split not in SPLITS:
            raise ConfigError(f"probe_split must be one of {SPLITS}")
        if not 0 < self.tau <= 0.5:
            raise ConfigError("tau must lie in (0, 0.5]")
        if self.batch_size_eval < 1:
            raise ConfigError("batch_size_eval must be positive")

    @property
    def seed(self) -> int:
        return self.train.seed

    def to_dict(self) -> dict:
        tr = {f.name: getattr(self.train, f.name) for f in fields(TrainConfig)}
        tr["lr_schedule"] = [[u, lr] for u, lr in self.train.lr_schedule]
        data = {f.name: getattr(self.data, f.name) for f in fields(DataConfig)}
        data["image_shape"] = list(self.data.image_shape)
        return {
            "run_id": self.run_id,
            "output_dir": self.output_dir,
            "architecture": self.architecture.to_dict(),
            "train": tr,
            "data": data,
            "sharing": None if self.sharing is None else self.sharing.to_dict(),
            "unroll": None if self.unroll is None else self.unroll.to_dict(),
            "probes": [{"name": p.name, "every": p.every} for p in self.probes],
            "probe_split": self.probe_split,
            "batch_size_eval": self.batch_size_eval,
            "tau": self.tau,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = _strict(d, cls, "")
        kw = dict(d)
        if "architecture" in d:
            kw["architecture"] = ArchitectureConfig(**_strict(d["architecture"], ArchitectureConfig, "architecture."))
        if "train" in d:
            kw["train"] = TrainConfig(**_strict(d["train"], TrainConfig, "train."))
        if "data" in d:
            kw["data"] = DataConfig(**_strict(d["data"], DataConfig, "data."))
        if d.get("sharing") is not None:
            kw["sharing"] = SharingSpec(**_strict(d["sharing"], SharingSpec, "sharing."))
        if d.get("unroll") is not None:
            kw["unroll"] = UnrollSpec(**_strict(d["unroll"], UnrollSpec, "unroll."))
        if "probes" in d:
            if not isinstance(d["probes"], list):
                raise ConfigError("probes must be a list")
            kw["probes"] = [
                ProbeSchedule(**_strict(p if isinstance(p, dict) else {"name": p}, ProbeSchedule, f"probes[{i}]."))
                for i, p in enumerate(d["probes"])
            ]
        try:
            return cls(**kw)
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from None


def _strict(d, cls, prefix: str) -> dict:
    if not isinstance(d, dict):
        raise ConfigError(f"{prefix or 'config'} must be a mapping, got {type(d).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(prefix + k for k in unknown)}")
    return d


def dumps(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False, default_flow_style=None)


def loads(text: str) -> ExperimentConfig:
    try:
        d = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse config: {e}") from None
    cfg = ExperimentConfig.from_dict(d or {})
    cfg.validate()
    return cfg


def load_config(path) -> ExperimentConfig:
    return loads(Path(path).read_text(encoding="utf-8"))


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(dumps(cfg), encoding="utf-8")

