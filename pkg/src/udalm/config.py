"""Experiment configuration: typed sections, strict YAML parsing, round-tripping.

Unknown keys are rejected with the full field path so a typo in a
hyperparameter name fails loudly instead of silently using a default.
"""

from __future__ import annotations

import dataclasses
import math
import os
from dataclasses import dataclass, field

import yaml

from .errors import ConfigError

CONFIG_SCHEMA_VERSION = 1

BACKBONES = ("tiny", "full")
SELECTION_MODES = ("dynamic", "fixed-landmark", "fixed-image", "none")
MRE_AVERAGES = ("pooled", "per-image")


@dataclass
class ModelConfig:
    num_landmarks: int = 19
    embed_dim: int = 256
    num_decoder_layers: int = 3
    stride: int = 4
    backbone: str = "full"
    input_size: tuple = (640, 800)  # (width, height) in pixels

    def validate(self):
        if self.num_landmarks < 1:
            raise ConfigError("model.num_landmarks must be >= 1")
        if self.embed_dim < 8 or self.embed_dim % 2 != 0:
            raise ConfigError("model.embed_dim must be an even integer >= 8")
        if self.num_decoder_layers < 1:
            raise ConfigError("model.num_decoder_layers must be >= 1")
        if self.stride < 1:
            raise ConfigError("model.stride must be >= 1")
        if self.backbone not in BACKBONES:
            raise ConfigError(f"model.backbone must be one of {BACKBONES}")
        if self.backbone == "tiny" and (self.stride & (self.stride - 1)) != 0:
            raise ConfigError("model.stride must be a power of two for the tiny backbone")
        if self.backbone == "full" and self.stride != 4:
            raise ConfigError("model.stride must be 4 for the full backbone")
        w, h = self.input_size
        if w % self.stride != 0 or h % self.stride != 0:
            raise ConfigError(
                f"model.input_size {w}x{h} must be divisible by stride {self.stride}"
            )

    @property
    def map_size(self):
        """Feature/score map size as (W, H) in grid cells."""
        w, h = self.input_size
        return (w // self.stride, h // self.stride)


@dataclass
class LossWeights:
    lambda_score: float = 100.0
    lambda_offset: float = 0.02
    lambda_domain: float = 0.01

    def validate(self):
        for name in ("lambda_score", "lambda_offset", "lambda_domain"):
            if getattr(self, name) < 0:
                raise ConfigError(f"weights.{name} must be >= 0")


@dataclass
class CurriculumConfig:
    delta: float = 0.2
    rounds: int | None = None  # None -> ceil(1/delta) self-training rounds
    selection: str = "dynamic"
    fixed_threshold: float = 0.4  # used by the fixed-* selection modes
    dal: bool = True
    dal_round0: bool = True
    reinit_each_round: bool = False

    def validate(self):
        if not (0 < self.delta <= 1):
            raise ConfigError("curriculum.delta must be in (0, 1]")
        if self.rounds is not None and self.rounds < 0:
            raise ConfigError("curriculum.rounds must be >= 0")
        if self.selection not in SELECTION_MODES:
            raise ConfigError(f"curriculum.selection must be one of {SELECTION_MODES}")

    @property
    def total_rounds(self):
        """Number of self-training rounds (round 0 not included)."""
        if self.rounds is not None:
            return self.rounds
        return math.ceil(1.0 / self.delta)


@dataclass
class OptimizerConfig:
    lr: float = 2e-4
    batch_size: int = 10
    epochs_per_round: int = 720
    decay_epochs: tuple = (480, 640)
    decay_factor: float = 0.1

    def validate(self):
        if self.lr <= 0:
            raise ConfigError("optimizer.lr must be > 0")
        if self.batch_size < 1:
            raise ConfigError("optimizer.batch_size must be >= 1")
        if self.epochs_per_round < 1:
            raise ConfigError("optimizer.epochs_per_round must be >= 1")
        for e in self.decay_epochs:
            if not (0 < e < self.epochs_per_round):
                raise ConfigError(
                    "optimizer.decay_epochs must lie strictly inside (0, epochs_per_round)"
                )
        if not (0 < self.decay_factor <= 1):
            raise ConfigError("optimizer.decay_factor must be in (0, 1]")


@dataclass
class AugmentConfig:
    scale: float = 0.1          # +- fraction of 1.0
    translate: float = 0.05     # +- fraction of image size
    rotate: float = 15.0        # +- degrees
    occlusion_count: int = 2    # max rectangles per image
    occlusion_size: float = 0.1  # max side as fraction of image size
    blur_prob: float = 0.3
    blur_kernels: tuple = (3, 5)

    def validate(self):
        if self.scale < 0 or self.scale >= 1:
            raise ConfigError("augment.scale must be in [0, 1)")
        if self.translate < 0 or self.rotate < 0:
            raise ConfigError("augment.translate and augment.rotate must be >= 0")
        if self.occlusion_count < 0 or not (0 <= self.occlusion_size < 1):
            raise ConfigError("augment.occlusion settings out of range")
        if not (0 <= self.blur_prob <= 1):
            raise ConfigError("augment.blur_prob must be in [0, 1]")
        for k in self.blur_kernels:
            if k < 1 or k % 2 == 0:
                raise ConfigError("augment.blur_kernels must be odd and >= 1")

    def is_identity(self):
        return (
            self.scale == 0 and self.translate == 0 and self.rotate == 0
            and self.occlusion_count == 0 and self.blur_prob == 0
        )


@dataclass
class DataConfig:
    source_manifest: str = ""
    target_manifest: str = ""
    target_test_manifest: str = ""

    def validate(self):
        pass


@dataclass
class EvalConfig:
    radii_mm: tuple = (2.0, 2.5, 3.0, 4.0)
    mre_average: str = "pooled"

    def validate(self):
        if len(self.radii_mm) == 0 or any(r <= 0 for r in self.radii_mm):
            raise ConfigError("eval.radii_mm must be positive")
        if self.mre_average not in MRE_AVERAGES:
            raise ConfigError(f"eval.mre_average must be one of {MRE_AVERAGES}")


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    curriculum: CurriculumConfig = field(default_factory=CurriculumConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    heatmap_sigma: float = 1.5  # Gaussian target width, in grid units
    seed: int = 0
    deterministic: bool = True

    def validate(self):
        for section in (self.model, self.weights, self.curriculum, self.optimizer,
                        self.augment, self.data, self.eval):
            section.validate()
        if self.heatmap_sigma <= 0:
            raise ConfigError("heatmap_sigma must be > 0")
        return self


_SECTION_TYPES = {
    "model": ModelConfig,
    "weights": LossWeights,
    "curriculum": CurriculumConfig,
    "optimizer": OptimizerConfig,
    "augment": AugmentConfig,
    "data": DataConfig,
    "eval": EvalConfig,
}

# Fields that are tuples in the dataclasses but lists in YAML/JSON.
_TUPLE_FIELDS = {"input_size", "decay_epochs", "blur_kernels", "radii_mm"}


def _coerce(cls, data: dict, path: str):
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"unknown config key '{path}{key}'")
        if key in _TUPLE_FIELDS:
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"config key '{path}{key}' must be a list")
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad value under '{path.rstrip('.') or '<root>'}': {exc}") from exc


def config_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    data = dict(data)
    version = data.pop("schema_version", CONFIG_SCHEMA_VERSION)
    if version != CONFIG_SCHEMA_VERSION:
        raise ConfigError(f"unsupported config schema_version {version}")

    top_known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    kwargs = {}
    for key, value in data.items():
        if key not in top_known:
            raise ConfigError(f"unknown config key '{key}'")
        if key in _SECTION_TYPES:
            if not isinstance(value, dict):
                raise ConfigError(f"config section '{key}' must be a mapping")
            kwargs[key] = _coerce(_SECTION_TYPES[key], value, f"{key}.")
        else:
            kwargs[key] = value
    cfg = ExperimentConfig(**kwargs)
    cfg.validate()
    return cfg


def config_to_dict(cfg: ExperimentConfig) -> dict:
    out = {"schema_version": CONFIG_SCHEMA_VERSION}
    for f in dataclasses.fields(ExperimentConfig):
        value = getattr(cfg, f.name)
        if dataclasses.is_dataclass(value):
            section = dataclasses.asdict(value)
            out[f.name] = {
                k: list(v) if isinstance(v, tuple) else v for k, v in section.items()
            }
        else:
            out[f.name] = value
    return out


def load_config(path: str) -> ExperimentConfig:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path) as fh:
        try:
            data = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"could not parse {path}: {exc}") from exc
    return config_from_dict(data or {})


def save_config(cfg: ExperimentConfig, path: str):
    with open(path, "w") as fh:
        yaml.safe_dump(config_to_dict(cfg), fh, sort_keys=False)
