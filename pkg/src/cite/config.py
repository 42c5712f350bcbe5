"""Experiment configuration: presets, JSON loading, and overrides.

A configuration bundles the model dimensions, the training
hyperparameters, and the synthetic-data recipe, plus the spatial encoding
used to featurize proposal boxes. Presets seed the defaults; explicit JSON
fields and ``--set`` overrides win over the preset. Unknown keys are
rejected.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .errors import ConfigError
from .network import ModelConfig


@dataclass
class TrainConfig:
    """Optimization schedule: Adam, then SGD at a tenth of the learning rate
    once validation accuracy stalls for `patience` epochs."""

    learning_rate: float = 5e-5
    l1_weight: float = 5e-5  # weight of the L1 penalty on concept logits
    batch_size: int = 200
    patience: int = 5
    sgd_lr_factor: float = 0.1
    max_epochs: int = 100
    seed: int = 0
    assignment: str = "learned"  # learned | kmeans | coarse | random
    kmeans_fit_split: str = "train"  # 'test' reproduces clustering on test queries

    def validate(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.l1_weight < 0:
            raise ConfigError("l1_weight must be non-negative")
        if self.batch_size < 1 or self.patience < 1 or self.max_epochs < 1:
            raise ConfigError("batch_size, patience, and max_epochs must be >= 1")
        if self.assignment not in ("learned", "kmeans", "coarse", "random"):
            raise ConfigError(f"unknown assignment {self.assignment!r}")
        if self.kmeans_fit_split not in ("train", "val", "test"):
            raise ConfigError(f"bad kmeans_fit_split {self.kmeans_fit_split!r}")


@dataclass
class SynthConfig:
    """Recipe for the synthetic grounding dataset.

    Each latent concept owns a text-feature cluster and a random sign
    pattern that modulates the region features of true matches, so
    phrase-region compatibility is conditional on the concept. Images are
    split 75/12.5/12.5 into train/val/test.
    """

    concepts: int = 4
    images: int = 800
    regions_per_image: int = 8
    phrases_per_image: int = 4
    proposals_per_image: int = 16
    d_v: int = 32
    d_t: int = 32
    noise_sigma: float = 0.1
    jitter: float = 0.15
    spatial_bias: bool = False
    seed: int = 0
    text_modes: int = 8  # scattered text prototypes per concept
    concept_scale: float = 2.5
    instance_scale: float = 1.0
    image_w: int = 640
    image_h: int = 480

    def validate(self):
        if min(self.concepts, self.images, self.regions_per_image,
               self.phrases_per_image, self.d_v, self.d_t, self.text_modes) < 1:
            raise ConfigError("synthetic counts and dims must be >= 1")
        if self.noise_sigma < 0 or self.jitter < 0:
            raise ConfigError("noise_sigma and jitter must be >= 0")
        if self.phrases_per_image > self.regions_per_image:
            raise ConfigError("phrases_per_image cannot exceed regions_per_image")
        if self.proposals_per_image < self.regions_per_image:
            raise ConfigError("proposals_per_image must cover the region boxes")
        if self.images < 8:
            raise ConfigError("need at least 8 images to populate all three splits")


@dataclass
class ExperimentConfig:
    preset: str = "synth"
    spatial: str = "flickr"  # none | flickr | referit
    model: ModelConfig = field(default_factory=lambda: ModelConfig(d_v=0, d_t=0))
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)

    def validate(self):
        if self.spatial not in ("none", "flickr", "referit"):
            raise ConfigError(f"unknown spatial encoding {self.spatial!r}")
        self.train.validate()
        self.synth.validate()
        # model dims may still be 0 here; they resolve against a dataset


# Per-dataset training presets. The synth preset is the desk-scale
# configuration the acceptance suite runs on.
PRESETS: dict[str, dict] = {
    "flickr30k": {
        "spatial": "flickr",
        "model": {"M": 256, "K": 4, "assignment_mode": "learned"},
        "train": {"learning_rate": 5e-5, "l1_weight": 5e-5, "batch_size": 200},
    },
    "referit": {
        "spatial": "referit",
        "model": {"M": 256, "K": 12, "assignment_mode": "learned"},
        "train": {"learning_rate": 5e-4, "l1_weight": 5e-4, "batch_size": 128},
    },
    "vgenome": {
        "spatial": "referit",
        "model": {"M": 256, "K": 12, "assignment_mode": "learned"},
        "train": {"learning_rate": 5e-5, "l1_weight": 5e-4, "batch_size": 128},
    },
    "synth": {
        "spatial": "flickr",
        "model": {"M": 16, "K": 4, "assignment_mode": "learned"},
        "train": {"learning_rate": 5e-4, "l1_weight": 5e-5, "batch_size": 200,
                  "max_epochs": 24},
    },
}

_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "synth": SynthConfig}


def _field_types(cls) -> dict[str, type]:
    return {f.name: f.type for f in dataclasses.fields(cls)}


def _coerce(value, target, key: str):
    if isinstance(target, bool):
        if isinstance(value, bool):
            return value
        raise ConfigError(f"config key {key}: expected a boolean, got {value!r}")
    if isinstance(target, int) and not isinstance(target, bool):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"config key {key}: expected an integer, got {value!r}")
        if isinstance(value, float) and not value.is_integer():
            raise ConfigError(f"config key {key}: expected an integer, got {value!r}")
        return int(value)
    if isinstance(target, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"config key {key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(target, str):
        if not isinstance(value, str):
            raise ConfigError(f"config key {key}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"config key {key}: unsupported value {value!r}")


def _apply_section(obj, updates: dict, section: str):
    known = {f.name for f in dataclasses.fields(obj)}
    for key, value in updates.items():
        if key not in known:
            raise ConfigError(f"unknown config key {section}.{key}")
        current = getattr(obj, key)
        setattr(obj, key, _coerce(value, current, f"{section}.{key}"))


def build_config(preset: str = "synth", overrides: dict | None = None) -> ExperimentConfig:
    """Start from a preset and layer field overrides on top."""
    if preset not in PRESETS:
        raise ConfigError(
            f"unknown preset {preset!r}; choose from {sorted(PRESETS)}"
        )
    cfg = ExperimentConfig(preset=preset)
    layers = [PRESETS[preset]]
    if overrides:
        layers.append(overrides)
    for layer in layers:
        for key, value in layer.items():
            if key == "preset":
                continue
            if key == "spatial":
                cfg.spatial = _coerce(value, cfg.spatial, "spatial")
            elif key in _SECTIONS:
                if not isinstance(value, dict):
                    raise ConfigError(f"config section {key!r} must be an object")
                _apply_section(getattr(cfg, key), value, key)
            else:
                raise ConfigError(f"unknown config key {key!r}")
    cfg.validate()
    return cfg


def load_config(path) -> ExperimentConfig:
    """Read a JSON config file: optional 'preset' plus section overrides."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} must be a JSON object")
    preset = raw.get("preset", "synth")
    if not isinstance(preset, str):
        raise ConfigError("config 'preset' must be a string")
    return build_config(preset, raw)


def apply_set_override(cfg: ExperimentConfig, expr: str):
    """Apply one CLI ``--set key=value`` override. Keys may be dotted
    (train.batch_size) or bare when unambiguous (batch_size)."""
    if "=" not in expr:
        raise ConfigError(f"--set expects key=value, got {expr!r}")
    key, text = expr.split("=", 1)
    key = key.strip()
    if key == "spatial":
        cfg.spatial = _parse_text(text, cfg.spatial, key)
        cfg.validate()
        return
    if "." in key:
        section, name = key.split(".", 1)
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section {section!r} in --set {expr!r}")
        targets = [(section, name)]
    else:
        targets = [
            (section, key)
            for section in _SECTIONS
            if key in _field_types(_SECTIONS[section])
        ]
        if not targets:
            raise ConfigError(f"no config field named {key!r}")
        if len(targets) > 1:
            hits = ", ".join(f"{s}.{key}" for s, _ in targets)
            raise ConfigError(f"--set key {key!r} is ambiguous ({hits}); use a dotted name")
    section, name = targets[0]
    obj = getattr(cfg, section)
    known = {f.name for f in dataclasses.fields(obj)}
    if name not in known:
        raise ConfigError(f"unknown config key {section}.{name}")
    current = getattr(obj, name)
    setattr(obj, name, _parse_text(text, current, f"{section}.{name}"))
    cfg.validate()


def _parse_text(text: str, current, key: str):
    text = text.strip()
    if isinstance(current, bool):
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"config key {key}: expected a boolean, got {text!r}")
    if isinstance(current, int):
        try:
            return int(text)
        except ValueError as exc:
            raise ConfigError(f"config key {key}: expected an integer, got {text!r}") from exc
    if isinstance(current, float):
        try:
            return float(text)
        except ValueError as exc:
            raise ConfigError(f"config key {key}: expected a number, got {text!r}") from exc
    return text
