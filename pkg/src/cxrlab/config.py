"""JSON experiment configuration.

Every key has a default; unknown keys are rejected with their dotted path. The
resolved configuration hashes to a short hex digest stamped into artifacts.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .losses import CompoundLossConfig
from .models import BackboneConfig
from .transforms import AugPolicy, PreprocConfig

SEED_ENV = "CXRLAB_SEED"


class ConfigKeyError(ValueError):
    pass


@dataclass
class DataConfig:
    manifest: str | None = None
    # phantom generation when no manifest is given
    n: int = 400
    image_size: int = 64
    lesion_contrast: float = 2.0
    seed: int = 0
    test_fraction: float = 0.2


@dataclass
class PretextConfig:
    mask_mode: str = "targetedCxr"  # or "center"
    size_range: tuple[int, int] = (17, 32)
    center_size: tuple[int, int] = (100, 100)
    reference_size: int = 224
    fill: str = "mean"  # or "zero"
    moco_variant: str = "cxr"
    queue_size: int = 4096
    momentum: float = 0.999
    temperature: float | None = None  # None -> per-variant default
    proj_dim: int | None = None
    dump_grids: int = 4


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    dropout: float = 0.2
    num_classes: int = 4


@dataclass
class StageConfig:
    epochs: int = 10
    batch_size: int = 8
    lr: float = 1e-3
    schedule: str = "constant"  # or "cosine"
    lr_min: float = 0.0
    optimizer: str = "adam"
    weight_decay: float = 0.0
    augment: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.lr_min > self.lr:
            raise ValueError("lr_min must not exceed lr")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.optimizer != "adam":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class MultitaskConfig:
    stage1: StageConfig = field(default_factory=lambda: StageConfig(epochs=4))
    stage2: StageConfig = field(default_factory=lambda: StageConfig(epochs=4))
    stage3: StageConfig = field(default_factory=lambda: StageConfig(epochs=12, lr=1e-3, schedule="cosine"))
    pretrain_loss: CompoundLossConfig = field(default_factory=CompoundLossConfig.pretrain)
    finetune_loss: CompoundLossConfig = field(default_factory=CompoundLossConfig)
    skip_stage1: bool = False
    skip_stage2: bool = False
    transfer: str = "encoder_decoder"  # or "encoder"


@dataclass
class TrainConfig:
    seed: int = 0
    val_fraction: float = 0.1
    baseline: StageConfig = field(default_factory=lambda: StageConfig(epochs=12))
    multitask: MultitaskConfig = field(default_factory=MultitaskConfig)
    pretrain: StageConfig = field(default_factory=lambda: StageConfig(epochs=5, augment=False))
    finetune: StageConfig = field(default_factory=lambda: StageConfig(epochs=12))


@dataclass
class EvalConfig:
    kfold: int = 5
    pairs: list[str] = field(default_factory=lambda: [
        "typical-indeterminate", "atypical-indeterminate", "typical-atypical", "positive-negative",
    ])
    batch_size: int = 32


@dataclass
class InterpretConfig:
    layer: str | None = None
    target_class: str = "typical"
    limit: int = 8
    box_bins: int = 20


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    preproc: PreprocConfig = field(default_factory=lambda: PreprocConfig(target_size=(64, 64)))
    augment: AugPolicy = field(
        default_factory=lambda: AugPolicy(rotation_deg=10.0, hflip_prob=0.5, scale_range=(1.0, 1.2))
    )
    pretext: PretextConfig = field(default_factory=PretextConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    interpret: InterpretConfig = field(default_factory=InterpretConfig)

    @property
    def image_size(self) -> tuple[int, int]:
        return tuple(self.preproc.target_size)


def full_scale_config() -> ExperimentConfig:
    """Full-scale settings: 224x224, DenseNet-121, batch 16, baseline lr 1e-3,
    multi-task stages of 30 epochs with lr 1e-4 and cosine annealing."""
    cfg = ExperimentConfig()
    cfg.preproc = PreprocConfig(target_size=(224, 224))
    cfg.model.backbone = BackboneConfig(name="denseNet121", feature_dim=1024)
    cfg.train.baseline = StageConfig(epochs=30, batch_size=16, lr=1e-3)
    mt = cfg.train.multitask
    mt.stage1 = StageConfig(epochs=30, batch_size=16, lr=1e-4, schedule="cosine")
    mt.stage2 = StageConfig(epochs=30, batch_size=16, lr=1e-4, schedule="cosine")
    mt.stage3 = StageConfig(epochs=30, batch_size=16, lr=1e-4, schedule="cosine")
    cfg.train.pretrain = StageConfig(epochs=30, batch_size=16, lr=1e-4, augment=False)
    cfg.train.finetune = StageConfig(epochs=30, batch_size=16, lr=1e-4, schedule="cosine")
    return cfg


# --------------------------------------------------------------------------- (de)serialisation


def to_dict(obj) -> dict:
    def conv(v):
        if dataclasses.is_dataclass(v):
            return {f.name: conv(getattr(v, f.name)) for f in dataclasses.fields(v)}
        if isinstance(v, (list, tuple)):
            return [conv(x) for x in v]
        return v
    return conv(obj)


def _convert(tp, value, path: str):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = typing.get_args(tp)
        if value is None and type(None) in args:
            return None
        for arg in args:
            if arg is type(None):
                continue
            return _convert(arg, value, path)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigKeyError(f"{path}: expected an object")
        return from_dict(tp, value, path)
    if origin is tuple:
        return tuple(value)
    if origin is list:
        return list(value)
    if tp is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    return value


def from_dict(cls, data: dict, path: str = ""):
    """Build dataclass ``cls`` from ``data``; missing keys keep their defaults."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        where = path or "<root>"
        raise ConfigKeyError(f"unknown config key(s) {unknown} in {where}")
    kwargs = {k: _convert(hints[k], v, f"{path}.{k}" if path else k) for k, v in data.items()}
    return cls(**kwargs)


def load_config(path: str | Path | None = None, env: dict | None = None) -> ExperimentConfig:
    """Load a JSON config (or defaults when ``path`` is None) and apply ``CXRLAB_SEED``."""
    if path is None:
        cfg = ExperimentConfig()
    else:
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"config not found: {path}")
        with open(path) as fh:
            cfg = from_dict(ExperimentConfig, json.load(fh))
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        cfg.train.seed = int(env[SEED_ENV])
    return cfg


def dump_config(cfg: ExperimentConfig, path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump(to_dict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _digest(payload) -> str:
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def config_hash(cfg: ExperimentConfig) -> str:
    return _digest(to_dict(cfg))


def compat_hash(cfg: ExperimentConfig) -> str:
    """Hash of the fields a checkpoint's tensors depend on (architecture only)."""
    bb = cfg.model.backbone
    return _digest({"backbone": bb.name, "feature_dim": bb.feature_dim})
