"""Experiment configuration: YAML files validated against a published schema.

Unknown keys are rejected. Validation errors carry the dotted field path so
CLI users can locate the problem (exit code 2).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import jsonschema
import yaml

from .contrast import ContrastConfig
from .distill import DistillConfig, LayerWeightConfig
from .errors import ConfigError, DuplicateClassError, IncrsegError, ScheduleMismatchError
from .pseudolabel import PseudoLabelConfig
from .schedule import build_schedule
from .trainer import TrainConfig

_POSITIVE_INT = {"type": "integer", "minimum": 1}
_NONNEG_NUMBER = {"type": "number", "minimum": 0}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "required": ["dataset", "schedule"],
    "properties": {
        "dataset": {
            "type": "object",
            "oneOf": [
                {
                    "additionalProperties": False,
                    "required": ["type", "num_classes", "images_per_class", "height", "width"],
                    "properties": {
                        "type": {"const": "synthetic"},
                        "num_classes": {"type": "integer", "minimum": 2},
                        "images_per_class": _POSITIVE_INT,
                        "val_images_per_class": _POSITIVE_INT,
                        "height": {"type": "integer", "minimum": 16},
                        "width": {"type": "integer", "minimum": 16},
                        "noise": _NONNEG_NUMBER,
                        "min_radius": _POSITIVE_INT,
                        "max_radius": _POSITIVE_INT,
                    },
                },
                {
                    "additionalProperties": False,
                    "required": ["type", "root"],
                    "properties": {
                        "type": {"const": "voc_format"},
                        "root": {"type": "string"},
                    },
                },
            ],
        },
        "schedule": {
            "type": "object",
            "additionalProperties": False,
            "required": ["class_order", "step_sizes"],
            "properties": {
                "class_order": {"type": "array", "items": _POSITIVE_INT, "minItems": 1},
                "step_sizes": {"type": "array", "items": _POSITIVE_INT, "minItems": 1},
                "protocol": {"enum": ["overlapped", "disjoint"]},
            },
        },
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"width": {"type": "integer", "minimum": 8}},
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "base_lr": {"type": "number", "exclusiveMinimum": 0},
                "momentum": _NONNEG_NUMBER,
                "weight_decay": _NONNEG_NUMBER,
                "batch_size": _POSITIVE_INT,
                "epochs_per_step": _POSITIVE_INT,
                "poly_power": {"type": "number", "exclusiveMinimum": 0},
                "seed": {"type": "integer"},
                "hflip": {"type": "boolean"},
                "distill": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "enabled": {"type": "boolean"},
                        "lambda_out": _NONNEG_NUMBER,
                        "alpha": {"type": "number", "exclusiveMinimum": 0},
                        "gamma": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                    },
                },
                "contrast": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "enabled": {"type": "boolean"},
                        "margin": _NONNEG_NUMBER,
                        "max_anchor_classes": _POSITIVE_INT,
                    },
                },
                "pseudo": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "mode": {"enum": ["none", "fixed", "dynamic"]},
                        "fixed_floor": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                        "stability_ratio": {"type": "number", "exclusiveMinimum": 0},
                        "min_confidence": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                    },
                },
            },
        },
        "output_dir": {"type": "string"},
    },
}


@dataclass(frozen=True)
class DatasetConfig:
    kind: str
    num_classes: int = 0
    images_per_class: int = 0
    val_images_per_class: int = 0
    height: int = 0
    width: int = 0
    noise: float = 0.08
    min_radius: int = 0
    max_radius: int = 0
    root: str = ""


@dataclass(frozen=True)
class ScheduleSpec:
    class_order: tuple
    step_sizes: tuple
    protocol: str = "overlapped"


@dataclass(frozen=True)
class ModelConfig:
    width: int = 64


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig
    schedule_spec: ScheduleSpec
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    output_dir: str = "out"

    def build_schedule(self):
        try:
            return build_schedule(
                self.schedule_spec.class_order,
                self.schedule_spec.step_sizes,
                self.schedule_spec.protocol,
            )
        except ScheduleMismatchError as exc:
            raise ConfigError(f"schedule.step_sizes: {exc}") from exc
        except DuplicateClassError as exc:
            raise ConfigError(f"schedule.class_order: {exc}") from exc

    def with_schedule(self, schedule):
        spec = ScheduleSpec(
            class_order=tuple(schedule.class_order),
            step_sizes=tuple(schedule.step_sizes),
            protocol=schedule.protocol.value,
        )
        return dataclasses.replace(self, schedule_spec=spec)


def parse_config(raw):
    """Validate a raw mapping and build the ExperimentConfig."""
    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        err = jsonschema.exceptions.best_match(errors)
        path = ".".join(str(p) for p in err.absolute_path) or "<root>"
        raise ConfigError(f"{path}: {err.message}")

    ds = raw["dataset"]
    if ds["type"] == "synthetic":
        dataset = DatasetConfig(
            kind="synthetic",
            num_classes=ds["num_classes"],
            images_per_class=ds["images_per_class"],
            val_images_per_class=ds.get("val_images_per_class", max(2, ds["images_per_class"] // 4)),
            height=ds["height"],
            width=ds["width"],
            noise=ds.get("noise", 0.08),
            min_radius=ds.get("min_radius", 0),
            max_radius=ds.get("max_radius", 0),
        )
    else:
        dataset = DatasetConfig(kind="voc_format", root=ds["root"])

    spec = ScheduleSpec(
        class_order=tuple(raw["schedule"]["class_order"]),
        step_sizes=tuple(raw["schedule"]["step_sizes"]),
        protocol=raw["schedule"].get("protocol", "overlapped"),
    )

    tr = raw.get("train", {})
    try:
        distill = DistillConfig(
            enabled=tr.get("distill", {}).get("enabled", True),
            lambda_out=tr.get("distill", {}).get("lambda_out", 2.0),
            layer_weight=LayerWeightConfig(
                alpha=tr.get("distill", {}).get("alpha", 1.0),
                gamma=tr.get("distill", {}).get("gamma", 0.9),
            ),
        )
        contrast = ContrastConfig(
            enabled=tr.get("contrast", {}).get("enabled", True),
            margin=tr.get("contrast", {}).get("margin", 1.0),
            max_anchor_classes=tr.get("contrast", {}).get("max_anchor_classes", 10),
        )
        pseudo = PseudoLabelConfig(
            mode=tr.get("pseudo", {}).get("mode", "dynamic"),
            fixed_floor=tr.get("pseudo", {}).get("fixed_floor", 0.7),
            stability_ratio=tr.get("pseudo", {}).get("stability_ratio", 4.0),
            min_confidence=tr.get("pseudo", {}).get("min_confidence", 0.5),
        )
        train = TrainConfig(
            base_lr=tr.get("base_lr", 0.01),
            momentum=tr.get("momentum", 0.9),
            weight_decay=tr.get("weight_decay", 5e-4),
            batch_size=tr.get("batch_size", 8),
            epochs_per_step=tr.get("epochs_per_step", 5),
            poly_power=tr.get("poly_power", 0.9),
            seed=tr.get("seed", 0),
            hflip=tr.get("hflip", False),
            distill=distill,
            contrast=contrast,
            pseudo=pseudo,
        )
    except IncrsegError as exc:
        raise ConfigError(f"train: {exc}") from exc

    config = ExperimentConfig(
        dataset=dataset,
        schedule_spec=spec,
        train=train,
        model=ModelConfig(width=raw.get("model", {}).get("width", 64)),
        output_dir=raw.get("output_dir", "out"),
    )
    config.build_schedule()  # surface schedule inconsistencies as CONFIG_ERROR
    if dataset.kind == "synthetic":
        bad = [c for c in spec.class_order if c > dataset.num_classes]
        if bad:
            raise ConfigError(
                f"schedule.class_order: classes {bad} exceed dataset.num_classes={dataset.num_classes}"
            )
    return config


def load_config(path):
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("<root>: config must be a mapping")
    return parse_config(raw)


def config_to_dict(config):
    out = {
        "dataset": {"type": config.dataset.kind},
        "schedule": {
            "class_order": list(config.schedule_spec.class_order),
            "step_sizes": list(config.schedule_spec.step_sizes),
            "protocol": config.schedule_spec.protocol,
        },
        "model": {"width": config.model.width},
        "train": {
            "base_lr": config.train.base_lr,
            "momentum": config.train.momentum,
            "weight_decay": config.train.weight_decay,
            "batch_size": config.train.batch_size,
            "epochs_per_step": config.train.epochs_per_step,
            "poly_power": config.train.poly_power,
            "seed": config.train.seed,
            "hflip": config.train.hflip,
            "distill": {
                "enabled": config.train.distill.enabled,
                "lambda_out": config.train.distill.lambda_out,
                "alpha": config.train.distill.layer_weight.alpha,
                "gamma": config.train.distill.layer_weight.gamma,
            },
            "contrast": {
                "enabled": config.train.contrast.enabled,
                "margin": config.train.contrast.margin,
                "max_anchor_classes": config.train.contrast.max_anchor_classes,
            },
            "pseudo": {
                "mode": config.train.pseudo.mode,
                "fixed_floor": config.train.pseudo.fixed_floor,
                "stability_ratio": config.train.pseudo.stability_ratio,
                "min_confidence": config.train.pseudo.min_confidence,
            },
        },
        "output_dir": config.output_dir,
    }
    if config.dataset.kind == "synthetic":
        out["dataset"].update(
            num_classes=config.dataset.num_classes,
            images_per_class=config.dataset.images_per_class,
            val_images_per_class=config.dataset.val_images_per_class,
            height=config.dataset.height,
            width=config.dataset.width,
            noise=config.dataset.noise,
        )
        if config.dataset.min_radius:
            out["dataset"]["min_radius"] = config.dataset.min_radius
        if config.dataset.max_radius:
            out["dataset"]["max_radius"] = config.dataset.max_radius
    else:
        out["dataset"]["root"] = config.dataset.root
    return out


def config_hash(config):
    """Canonical hash of the effective configuration (names the output dir)."""
    blob = json.dumps(config_to_dict(config), sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


def dump_config(config, path):
    with open(path, "w") as fh:
        yaml.safe_dump(config_to_dict(config), fh, sort_keys=True)
