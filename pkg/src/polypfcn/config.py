"""Declarative experiment configuration (YAML or JSON)."""

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from .datasets import AugmentConfig
from .models import BackboneConfig
from .validation import as_size

SCHEMES = ("scheme1", "scheme2", "scheme1_extended", "s0_baseline")


@dataclass(frozen=True)
class OptimizerSpec:
    kind: str = "adam_amsgrad"
    lr: float = 1e-4
    momentum: float = 0.9
    schedule: str = "constant"
    epochs: int = 500
    batch_size: int = 24

    def __post_init__(self):
        if self.kind not in ("sgd_momentum", "adam_amsgrad"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if self.schedule not in ("constant", "cosine_decay"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if not self.lr > 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")


def fcn_optimizer(**kw):
    """Segmentation defaults: Adam with AMSGrad, lr 1e-4, 500 epochs, batch 24."""
    return OptimizerSpec(**{"kind": "adam_amsgrad", "lr": 1e-4, "schedule": "constant",
                            "epochs": 500, "batch_size": 24, **kw})


def cnn_optimizer(**kw):
    """Classification defaults: SGD momentum 0.9, lr 1e-3 cosine decay, 250 epochs, batch 24."""
    return OptimizerSpec(**{"kind": "sgd_momentum", "lr": 1e-3, "momentum": 0.9,
                            "schedule": "cosine_decay", "epochs": 250, "batch_size": 24, **kw})


@dataclass(frozen=True)
class FCNConfig:
    lr: float = 1e-4
    epochs: int = 500
    batch_size: int = 24
    optimizer: str = "adam_amsgrad"
    schedule: str = "constant"
    momentum: float = 0.9

    def optimizer_spec(self, epoch_scale=1.0):
        return OptimizerSpec(self.optimizer, self.lr, self.momentum, self.schedule,
                             scaled_epochs(self.epochs, epoch_scale), self.batch_size)


@dataclass(frozen=True)
class CNNConfig:
    lr: float = 1e-3
    momentum: float = 0.9
    epochs: int = 250
    batch_size: int = 24
    optimizer: str = "sgd_momentum"
    schedule: str = "cosine_decay"
    input_size: int = 224
    background_per_image: int = 2
    augment_patches: bool = True

    def optimizer_spec(self, epoch_scale=1.0):
        return OptimizerSpec(self.optimizer, self.lr, self.momentum, self.schedule,
                             scaled_epochs(self.epochs, epoch_scale), self.batch_size)


@dataclass(frozen=True)
class DatasetConfig:
    root: str = "data"
    layout: str = "generic"
    max_side: int = None


@dataclass(frozen=True)
class ExperimentConfig:
    scheme: str = "scheme1"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    input_size: int = 320
    pretrained_path: str = None
    seed: int = 0
    fcn: FCNConfig = field(default_factory=FCNConfig)
    cnn: CNNConfig = field(default_factory=CNNConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    output_dir: str = "runs/experiment"
    epoch_scale: float = 1.0
    deterministic: bool = True

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")
        if not self.epoch_scale > 0:
            raise ValueError("epoch_scale must be > 0")

    @property
    def input_hw(self):
        return as_size(self.input_size)

    def to_dict(self):
        d = asdict(self)
        d["backbone"] = self.backbone.to_dict()
        if not isinstance(d["input_size"], int):
            d["input_size"] = list(d["input_size"])
        return d

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        nested = {"dataset": DatasetConfig, "fcn": FCNConfig, "cnn": CNNConfig,
                  "augment": AugmentConfig, "backbone": BackboneConfig}
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        for key, typ in nested.items():
            if key in data and data[key] is not None:
                sub = dict(data[key])
                allowed = {f.name for f in fields(typ)}
                bad = set(sub) - allowed
                if bad:
                    raise ValueError(f"unknown keys under {key}: {sorted(bad)}")
                data[key] = typ(**sub)
        if isinstance(data.get("input_size"), list):
            data["input_size"] = tuple(data["input_size"])
        return cls(**data)

    def with_overrides(self, **kw):
        return replace(self, **kw)


def scaled_epochs(epochs, scale):
    """Epoch count after applying ``epoch_scale``; never below one."""
    return max(1, int(round(epochs * scale)))


def load_config(path):
    path = Path(path)
    text = path.read_text()
    data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    return ExperimentConfig.from_dict(data or {})


def save_config(cfg, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
    return path
