"""JSON run configuration: schema, defaults, loading and dataset resolution."""

import copy
import json
from pathlib import Path

import jsonschema

from .data import load_idx, normalize, synthetic_blobs
from .errors import ConfigError
from .trainer import TrainConfig
from .triplets import AugmentationPolicy

DEFAULT_R_MIN = [0.1, 0.3, 0.5, 0.7, 0.9]

_number = {"type": "number"}
_nonneg = {"type": "number", "minimum": 0}
_int = {"type": "integer"}
_range = {"oneOf": [{"type": "null"},
                    {"type": "array", "items": _number, "minItems": 2, "maxItems": 2}]}

POLICY_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "rotation": _nonneg,
        "scale": _range,
        "flip_prob": {"type": "number", "minimum": 0, "maximum": 1},
        "erase": _range,
        "brightness": _nonneg,
        "contrast": _range,
        "augment_count": {"type": "integer", "minimum": 1},
    },
}

TRAIN_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "alpha": _nonneg, "beta": _nonneg, "gamma": _nonneg, "omega": _nonneg,
        "margin": {"type": "number", "exclusiveMinimum": 0},
        "lr": _nonneg,
        "batch_size": {"type": "integer", "minimum": 2},
        "pretrain_epochs": {"type": "integer", "minimum": 0},
        "joint_epochs": {"type": "integer", "minimum": 0},
        "init_seed": _int, "shuffle_seed": _int, "augment_seed": _int,
        "variant": {"enum": ["shallow", "deep"]},
        "latent_dim": {"oneOf": [{"type": "null"}, {"type": "integer", "minimum": 1}]},
        "channels": {"oneOf": [{"type": "null"},
                               {"type": "array", "items": {"type": "integer", "minimum": 1},
                                "minItems": 1}]},
        "batch_norm_latent": {"type": "boolean"},
        "policy": POLICY_SCHEMA,
        "target_refresh_epochs": {"type": "integer", "minimum": 0},
        "balance_variant": {"enum": ["implemented", "literal"]},
        "max_tries": {"type": "integer", "minimum": 1},
        "kmeans_n_init": {"type": "integer", "minimum": 1},
        "early_stop": {"type": "boolean"},
        "early_stop_tol": _nonneg,
    },
}

DATASET_SCHEMA = {
    "oneOf": [
        {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind", "images"],
            "properties": {
                "kind": {"const": "idx"},
                "images": {"type": "string"},
                "labels": {"type": ["string", "null"]},
                "class_count": {"type": ["integer", "null"], "minimum": 1},
                "normalize": {"type": "boolean"},
            },
        },
        {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind"],
            "properties": {
                "kind": {"const": "synthetic"},
                "n_classes": {"type": "integer", "minimum": 2},
                "n_per_class": {"type": "integer", "minimum": 1},
                "image_size": {"type": "integer", "minimum": 1},
                "separation": {"type": "number", "exclusiveMinimum": 0},
                "noise_sigma": _nonneg,
                "seed": _int,
                "normalize": {"type": "boolean"},
            },
        },
    ]
}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "dcsep run configuration",
    "type": "object",
    "additionalProperties": False,
    "required": ["dataset"],
    "properties": {
        "dataset": DATASET_SCHEMA,
        "n_clusters": {"type": ["integer", "null"], "minimum": 2},
        "out_dir": {"type": "string"},
        "timing": {"type": "boolean"},
        "train": TRAIN_SCHEMA,
        "ablation": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"seeds": {"type": "array", "items": _int, "minItems": 1}},
        },
        "imbalance": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "r_min": {"type": "array", "minItems": 1,
                          "items": {"type": "number", "exclusiveMinimum": 0, "maximum": 1}},
                "seed": _int,
            },
        },
    },
}

SYNTHETIC_DEFAULTS = {"kind": "synthetic", "n_classes": 3, "n_per_class": 100,
                      "image_size": 8, "separation": 1.0, "noise_sigma": 0.1, "seed": 0,
                      "normalize": True}


def defaults():
    """The complete default configuration document."""
    return {
        "dataset": dict(SYNTHETIC_DEFAULTS),
        "n_clusters": None,
        "out_dir": "runs/default",
        "timing": False,
        "train": TrainConfig().to_dict(),
        "ablation": {"seeds": [0, 1, 2]},
        "imbalance": {"r_min": list(DEFAULT_R_MIN), "seed": 0},
    }


def _merge(base, override):
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict) and key != "dataset":
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def validate(doc):
    try:
        jsonschema.validate(doc, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"invalid config at {where}: {exc.message}") from None
    return doc


def resolve(doc, base_dir=None):
    """Validate a (partial) document and fill in every default."""
    validate(doc)
    full = _merge(defaults(), doc)
    if full["dataset"]["kind"] == "synthetic":
        full["dataset"] = {**SYNTHETIC_DEFAULTS, **full["dataset"]}
    else:
        full["dataset"] = {"labels": None, "class_count": None, "normalize": True,
                           **full["dataset"]}
        if base_dir is not None:
            for key in ("images", "labels"):
                path = full["dataset"][key]
                if path is not None and not Path(path).is_absolute():
                    full["dataset"][key] = str(Path(base_dir) / path)
    validate(full)
    train_config(full)  # surfaces cross-field errors before any work
    return full


def load(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    return resolve(doc, base_dir=path.parent)


def apply_seed(doc, seed):
    """``--seed N`` sets the init, shuffle and augment seeds to N, N+1, N+2."""
    doc = copy.deepcopy(doc)
    doc["train"].update(init_seed=seed, shuffle_seed=seed + 1, augment_seed=seed + 2)
    return doc


def train_config(doc):
    t = dict(doc["train"])
    policy = t.pop("policy", None)
    try:
        if policy is not None:
            t["policy"] = AugmentationPolicy.from_dict(
                {**AugmentationPolicy.for_digits().to_dict(), **policy})
        return TrainConfig(**t)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid train settings: {exc}") from None


def load_dataset(doc):
    spec = doc["dataset"]
    if spec["kind"] == "idx":
        ds = load_idx(spec["images"], spec.get("labels"), spec.get("class_count"))
    else:
        ds = synthetic_blobs(spec["n_classes"], spec["n_per_class"], spec["image_size"],
                             spec["separation"], spec["noise_sigma"], spec["seed"])
    return normalize(ds) if spec.get("normalize", True) else ds


def n_clusters(doc, dataset):
    k = doc.get("n_clusters") or dataset.class_count
    if not k:
        raise ConfigError("n_clusters is required when the dataset has no labels")
    return k
