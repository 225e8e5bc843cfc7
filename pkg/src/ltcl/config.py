"""Config file schema: JSON in, validated dataclasses out, unknown keys rejected."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .encoder import EncoderConfig
from .errors import ConfigError
from .losses import LossConfig
from .synth import DatasetSpec, PatternBank, build_pattern_bank
from .train import QueueConfig, Stage1Config, Stage2Config


@dataclass(frozen=True)
class BankConfig:
    num_motifs: int = 28
    sharing_degree: int = 2
    motifs_per_class: int = 3


@dataclass(frozen=True)
class DataConfig:
    num_classes: int = 20
    n_max: int = 500
    imbalance_ratio: int = 100
    class_counts: tuple[int, ...] | None = None  # overrides the shorthand above
    image_size: int = 32
    channels: int = 3
    seed: int = 0
    test_per_class: int = 20
    bank: BankConfig = field(default_factory=BankConfig)

    def spec(self) -> DatasetSpec:
        if self.class_counts is not None:
            return DatasetSpec(class_counts=tuple(self.class_counts),
                               image_size=self.image_size, channels=self.channels,
                               seed=self.seed, test_per_class=self.test_per_class)
        return DatasetSpec.exponential(num_classes=self.num_classes, n_max=self.n_max,
                                       imbalance_ratio=self.imbalance_ratio,
                                       image_size=self.image_size, seed=self.seed,
                                       test_per_class=self.test_per_class)

    def build_bank(self) -> PatternBank:
        return build_pattern_bank(self.bank.num_motifs, self.spec().num_classes,
                                  self.bank.sharing_degree, seed=self.seed,
                                  motifs_per_class=self.bank.motifs_per_class)


@dataclass(frozen=True)
class FullConfig:
    dataset: DataConfig = field(default_factory=DataConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    queue: QueueConfig = field(default_factory=QueueConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def with_seed(self, seed: int) -> "FullConfig":
        return dataclasses.replace(
            self,
            stage1=dataclasses.replace(self.stage1, seed=seed),
            stage2=dataclasses.replace(self.stage2, seed=seed),
        )


_NESTED = {
    "dataset": DataConfig,
    "loss": LossConfig,
    "stage1": Stage1Config,
    "stage2": Stage2Config,
    "queue": QueueConfig,
    "encoder": EncoderConfig,
    "bank": BankConfig,
}


def _coerce(value, target_type):
    if isinstance(value, list):
        return tuple(_coerce(v, None) for v in value)
    return value


def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object, got {type(data).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{path}: unknown keys {unknown}")
    kwargs = {}
    for key, value in data.items():
        if key in _NESTED and isinstance(value, dict):
            kwargs[key] = _build(_NESTED[key], value, f"{path}.{key}")
        else:
            kwargs[key] = _coerce(value, None)
    try:
        return cls(**kwargs)
    except TypeError as err:
        raise ConfigError(f"{path}: {err}") from err


def config_from_dict(data: dict) -> FullConfig:
    return _build(FullConfig, data, "config")


def load_config(path: str | Path | None) -> FullConfig:
    """Load a config file; None gives the desk-scale defaults."""
    if path is None:
        return FullConfig()
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    return config_from_dict(data)


def config_hash(cfg: FullConfig) -> str:
    import hashlib

    blob = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]
