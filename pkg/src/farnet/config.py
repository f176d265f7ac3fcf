"""Run configuration: one nested record mirrored 1:1 by the YAML config file.

Field names in the file match the dataclass fields exactly, e.g.

    model:
      backbone: toy
      k_landmarks: 4
      fusion: concat
      refinement: guided
    loss:
      alpha: 40.0
      loss_kind: ewc
    dataset:
      kind: synthetic
      input_size: [128, 128]
      k_landmarks: 4
    optimizer: {kind: adadelta, lr: 0.0001}
    epochs: 300
    sigma: 10.0
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import yaml

from .datasets import AugmentConfig, DatasetSpec
from .exceptions import ConfigError, ParameterError
from .losses import LossConfig
from .model import ChannelSchedule, ModelConfig

__all__ = [
    "OptimizerConfig",
    "RunConfig",
    "run_config_to_dict",
    "run_config_from_dict",
    "load_run_config",
    "save_run_config",
    "dataset_spec_from_dict",
    "load_dataset_spec",
]


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adadelta"
    lr: float = 1e-4

    def __post_init__(self):
        if self.kind.lower() != "adadelta":
            raise ConfigError(f"only the adadelta optimizer is supported, got {self.kind!r}")
        object.__setattr__(self, "kind", "adadelta")
        if self.lr <= 0:
            raise ParameterError(f"lr must be positive, got {self.lr}")


@dataclass
class RunConfig:
    """Defaults reproduce the flagship recipe: DenseNet-121 at 640x800 input,
    19 landmarks, EWC alpha 40, sigma 10, Adadelta lr 1e-4, 300 epochs,
    batch size 1."""

    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    dataset: DatasetSpec = field(
        default_factory=lambda: DatasetSpec(
            kind="cephalometric", k_landmarks=19, input_size=(640, 800)
        )
    )
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    epochs: int = 300
    batch_size: int = 1
    sigma: float = 10.0
    seed: int = 0
    checkpoint_dir: str = "runs/run"
    deterministic: bool = True
    val_split: str | None = None       # dataset split evaluated per epoch
    val_every: int = 1
    checkpoint_every: int = 50
    weights_path: str | None = None    # pretrained backbone archive

    def __post_init__(self):
        if self.epochs < 1:
            raise ParameterError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ParameterError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.sigma <= 0:
            raise ParameterError(f"sigma must be positive, got {self.sigma}")
        if self.val_every < 1 or self.checkpoint_every < 1:
            raise ParameterError("val_every and checkpoint_every must be >= 1")
        if self.model.k_landmarks != self.dataset.k_landmarks:
            raise ConfigError(
                f"model regresses {self.model.k_landmarks} landmarks but the dataset "
                f"has {self.dataset.k_landmarks}"
            )


def _plain(value):
    if isinstance(value, Enum):
        return value.value
    if dataclasses.is_dataclass(value) and not isinstance(value, type):
        return {f.name: _plain(getattr(value, f.name)) for f in dataclasses.fields(value)}
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def run_config_to_dict(config: RunConfig) -> dict:
    return _plain(config)


def _pair(value, name: str) -> tuple:
    if not isinstance(value, (list, tuple)) or len(value) != 2:
        raise ConfigError(f"{name} must be a two-element list, got {value!r}")
    return tuple(value)


def run_config_from_dict(data: dict) -> RunConfig:
    """Rebuild a RunConfig from the plain-dict (YAML) form."""
    if not isinstance(data, dict):
        raise ConfigError(f"config root must be a mapping, got {type(data).__name__}")
    data = dict(data)
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")

    def section(name) -> dict | None:
        """Sections absent from the file fall back to the RunConfig default."""
        value = data.pop(name, None)
        if value is None:
            return None
        if not isinstance(value, dict):
            raise ConfigError(f"config section {name!r} must be a mapping")
        return dict(value)

    def build(cls, d: dict, name: str):
        """TypeError = unknown field, ValueError = bad enum string; both are config errors."""
        try:
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad {name} section: {exc}") from exc

    kwargs: dict = {}

    model_d = section("model")
    if model_d is not None:
        if model_d.get("schedule") is not None:
            sched = dict(model_d["schedule"])
            if sched.get("up2_channels") is not None:
                sched["up2_channels"] = {
                    int(k): int(v) for k, v in dict(sched["up2_channels"]).items()
                }
            model_d["schedule"] = build(ChannelSchedule, sched, "model.schedule")
        kwargs["model"] = build(ModelConfig, model_d, "model")

    loss_d = section("loss")
    if loss_d is not None:
        if loss_d.get("head_weights") is not None:
            loss_d["head_weights"] = _pair(loss_d["head_weights"], "loss.head_weights")
        kwargs["loss"] = build(LossConfig, loss_d, "loss")

    ds_d = section("dataset")
    if ds_d is not None:
        kwargs["dataset"] = dataset_spec_from_dict(ds_d)

    opt_d = section("optimizer")
    if opt_d is not None:
        kwargs["optimizer"] = build(OptimizerConfig, opt_d, "optimizer")

    try:
        return RunConfig(**kwargs, **data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad run config: {exc}") from exc


def dataset_spec_from_dict(data: dict) -> DatasetSpec:
    """Build a DatasetSpec from its plain-dict (YAML) form."""
    if not isinstance(data, dict):
        raise ConfigError(f"dataset spec must be a mapping, got {type(data).__name__}")
    ds_d = dict(data)
    for key in ("input_size", "wrist_indices"):
        if ds_d.get(key) is not None:
            ds_d[key] = _pair(ds_d[key], f"dataset.{key}")
    if ds_d.get("augmentation") is not None:
        aug = dict(ds_d["augmentation"])
        if aug.get("scale_range") is not None:
            aug["scale_range"] = _pair(aug["scale_range"], "dataset.augmentation.scale_range")
        try:
            ds_d["augmentation"] = AugmentConfig(**aug)
        except TypeError as exc:
            raise ConfigError(f"bad dataset spec: {exc}") from exc
    try:
        return DatasetSpec(**ds_d)
    except (TypeError, ValueError) as exc:
        # ValueError covers kind strings outside the enum
        raise ConfigError(f"bad dataset spec: {exc}") from exc


def load_dataset_spec(path: str | Path) -> DatasetSpec:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"dataset spec file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return dataset_spec_from_dict(data or {})


def load_run_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    try:
        return run_config_from_dict(data or {})
    except TypeError as exc:
        raise ConfigError(f"bad config {path}: {exc}") from exc


def save_run_config(config: RunConfig, path: str | Path) -> None:
    Path(path).write_text(
        yaml.safe_dump(run_config_to_dict(config), sort_keys=False), encoding="utf-8"
    )
