"""Run configuration: one JSON document holds every hyperparameter.

Flags carry only paths and command names; the config is schema-validated
up front (unknown keys are rejected) and echoed into the output directory
so any run can be reproduced from its artifacts alone.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .augment import AugmentConfig, SignalAugmentConfig, StaticAugmentConfig, StructuredAugmentConfig
from .losses import LossConfig
from .models import HeadConfig, MLPConfig, ModelConfig, SequenceConfig, SignalEncoderConfig


class ConfigError(ValueError):
    """The run configuration is malformed."""


@dataclass
class TrainConfig:
    lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 128
    pt_epochs: int = 15
    ft_max_epochs: int = 10
    early_stop_patience: int = 3
    eval_batch_size: int = 256
    bootstrap_resamples: int = 100

    @staticmethod
    def desk():
        return TrainConfig(batch_size=32)

    def validate(self):
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (train-mode batchnorm)")
        if self.pt_epochs < 1 or self.ft_max_epochs < 1:
            raise ConfigError("pt_epochs and ft_max_epochs must be >= 1")
        return self


@dataclass
class DataConfig:
    visits: str = ""
    sample_rate: float = 4.0
    label_fraction: float = 1.0

    def validate(self):
        if not self.visits:
            raise ConfigError("data.visits path is required")
        if self.sample_rate <= 0:
            raise ConfigError("data.sample_rate must be positive")
        if not 0.0 < self.label_fraction <= 1.0:
            raise ConfigError("data.label_fraction must be in (0, 1]")
        return self


@dataclass
class RunConfig:
    seed: int = 0
    mode: str = "multimodal"
    out_dir: str = "runs/run0"
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig.desk)
    loss: LossConfig = field(default_factory=LossConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    train: TrainConfig = field(default_factory=TrainConfig.desk)

    def validate(self):
        if self.mode not in ("unimodal", "multimodal"):
            raise ConfigError(f"mode must be unimodal or multimodal, got {self.mode!r}")
        self.data.validate()
        self.train.validate()
        self.augment.validate()
        try:
            self.loss.validate()
        except ValueError as e:
            raise ConfigError(str(e)) from e
        self.model.mode = self.mode
        self.model.with_predictors = self.loss.family == "simsiam"
        return self

    def to_dict(self):
        return {
            "seed": self.seed,
            "mode": self.mode,
            "out_dir": self.out_dir,
            "data": dataclasses.asdict(self.data),
            "model": self.model.to_dict(),
            "loss": dataclasses.asdict(self.loss),
            "augment": self.augment.to_dict(),
            "train": dataclasses.asdict(self.train),
        }

    def to_json(self, path):
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")


def _strict(cls, payload, where):
    """Build a flat dataclass from a dict, rejecting unknown keys."""
    if not isinstance(payload, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(payload) - known
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    return cls(**payload)


_MODEL_PRESETS = {"desk": ModelConfig.desk, "paper": ModelConfig.paper}
_TRAIN_PRESETS = {"desk": TrainConfig.desk, "paper": TrainConfig}
_MODEL_SECTIONS = {
    "structured_encoder": MLPConfig,
    "static_encoder": MLPConfig,
    "signal_encoder": SignalEncoderConfig,
    "sequence": SequenceConfig,
    "head": HeadConfig,
}
_AUGMENT_SECTIONS = {
    "signal": SignalAugmentConfig,
    "structured": StructuredAugmentConfig,
    "static": StaticAugmentConfig,
}


def _apply_overrides(obj, payload, sections, where):
    for key, value in payload.items():
        if key in sections:
            section = getattr(obj, key)
            if not isinstance(value, dict):
                raise ConfigError(f"{where}.{key}: expected an object")
            known = {f.name for f in dataclasses.fields(sections[key])}
            unknown = set(value) - known
            if unknown:
                raise ConfigError(f"{where}.{key}: unknown keys {sorted(unknown)}")
            for k, v in value.items():
                setattr(section, k, v)
        elif hasattr(obj, key):
            setattr(obj, key, value)
        else:
            raise ConfigError(f"{where}: unknown key {key!r}")
    return obj


def _load_model(payload):
    payload = dict(payload or {})
    preset = payload.pop("preset", "desk")
    if preset not in _MODEL_PRESETS:
        raise ConfigError(f"model.preset must be one of {sorted(_MODEL_PRESETS)}")
    cfg = _MODEL_PRESETS[preset]()
    payload.pop("mode", None)  # owned by the top-level mode
    _apply_overrides(cfg, payload, _MODEL_SECTIONS, "model")
    cfg.signal_encoder.stage_channels = tuple(cfg.signal_encoder.stage_channels)
    cfg.signal_encoder.blocks_per_stage = tuple(cfg.signal_encoder.blocks_per_stage)
    return cfg


def _load_train(payload):
    payload = dict(payload or {})
    preset = payload.pop("preset", "desk")
    if preset not in _TRAIN_PRESETS:
        raise ConfigError(f"train.preset must be one of {sorted(_TRAIN_PRESETS)}")
    return _apply_overrides(_TRAIN_PRESETS[preset](), payload, {}, "train")


def _load_augment(payload):
    return _apply_overrides(AugmentConfig(), dict(payload or {}), _AUGMENT_SECTIONS, "augment")


def load_run_config(source) -> RunConfig:
    """Parse and validate a run config from a dict or a JSON file path."""
    if isinstance(source, dict):
        payload = dict(source)
    else:
        with open(source, "r", encoding="utf-8") as f:
            try:
                payload = json.load(f)
            except json.JSONDecodeError as e:
                raise ConfigError(f"invalid JSON in {source}: {e}") from e
    known = {"seed", "mode", "out_dir", "data", "model", "loss", "augment", "train"}
    unknown = set(payload) - known
    if unknown:
        raise ConfigError(f"unknown top-level keys {sorted(unknown)}")
    try:
        cfg = RunConfig(
            seed=int(payload.get("seed", 0)),
            mode=payload.get("mode", "multimodal"),
            out_dir=payload.get("out_dir", "runs/run0"),
            data=_strict(DataConfig, payload.get("data", {}), "data"),
            model=_load_model(payload.get("model", {})),
            loss=_strict(LossConfig, payload.get("loss", {}), "loss"),
            augment=_load_augment(payload.get("augment", {})),
            train=_load_train(payload.get("train", {})),
        )
    except TypeError as e:
        raise ConfigError(str(e)) from e
    return cfg.validate()
