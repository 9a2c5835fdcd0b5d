"""Run configuration: defaults, YAML loading, schema validation, merging.

Resolution order is defaults, then the config file, then command-line
flags; the resolved mapping is validated as a whole against
:data:`CONFIG_SCHEMA` and every violation is reported at once.
"""

from __future__ import annotations

import copy
from pathlib import Path

import jsonschema
import yaml

from .errors import ConfigError
from .models import MODEL_KINDS, ModelConfig
from .training import TrainConfig

DEFAULTS: dict = {
    "model": ModelConfig().to_dict(),
    "training": {k: v for k, v in TrainConfig().to_dict().items() if k != "model"},
    "data": {
        "train": None,          # JSONL path; null generates the default synthetic set
        "test": None,           # JSONL path; null splits the training data
        "split": [0.8, 0.2],
        "split_seed": 0,
        "generate": {"n_signal": 20000, "n_background": 20000, "seed": 0},
    },
    "explain": {"attention": True, "specialization": True, "subset": "test-all"},
    "jobs": 1,
}

_int = {"type": "integer"}
_pos_int = {"type": "integer", "minimum": 1}
_num = {"type": "number"}

CONFIG_SCHEMA: dict = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "moegt run configuration",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": list(MODEL_KINDS)},
                "hidden": _pos_int, "heads": _pos_int, "layers": _pos_int, "experts": _pos_int,
                "top_k": _pos_int, "expert_size": _pos_int, "ffn_size": _pos_int,
                "pe_dim": {"type": "integer", "minimum": 1, "maximum": 5},
                "dropout": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "expert_activation": {"enum": ["leaky_relu", "relu"]},
                "mlp_hidden": {"type": "array", "items": _pos_int, "minItems": 2, "maxItems": 2},
                "gcn_hidden": {"type": "array", "items": _pos_int, "minItems": 2, "maxItems": 2},
            },
        },
        "training": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "epochs": _pos_int, "batch_size": _pos_int,
                "w_load": {"type": "number", "minimum": 0},
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "lr_decay": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "seeds": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1},
                "eval_each_epoch": {"type": "boolean"},
            },
        },
        "data": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "train": {"type": ["string", "null"]},
                "test": {"type": ["string", "null"]},
                "split": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0},
                          "minItems": 2, "maxItems": 2},
                "split_seed": {"type": "integer", "minimum": 0},
                "generate": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {"n_signal": {"type": "integer", "minimum": 0},
                                   "n_background": {"type": "integer", "minimum": 0},
                                   "seed": {"type": "integer", "minimum": 0}},
                },
            },
        },
        "explain": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "attention": {"type": "boolean"},
                "specialization": {"type": "boolean"},
                "subset": {"enum": ["train-all", "test-all", "test-correct-signal",
                                    "test-correct-background", "test-misclassified"]},
            },
        },
        "jobs": _pos_int,
    },
}


def deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def schema_errors(config: dict) -> list[str]:
    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(config), key=lambda e: [str(p) for p in e.absolute_path])
    return [f"{'.'.join(str(p) for p in e.absolute_path) or '<root>'}: {e.message}" for e in errors]


def load_file(path) -> dict:
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"{path}: config file not found") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML: {exc}") from None
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return doc


def resolve(file_config: dict | None = None, overrides: dict | None = None) -> dict:
    """Defaults <- file <- overrides, validated; raises ConfigError listing every problem."""
    config = deep_merge(DEFAULTS, file_config or {})
    config = deep_merge(config, overrides or {})
    problems = schema_errors(config)
    if not problems:
        try:
            train_config(config).validate()
        except ConfigError as exc:
            problems.append(str(exc))
        if abs(sum(config["data"]["split"]) - 1.0) > 1e-9:
            problems.append(f"data.split: fractions must sum to 1, got {config['data']['split']}")
    if problems:
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(problems))
    return config


def train_config(config: dict) -> TrainConfig:
    return TrainConfig.from_dict({**config["training"], "model": config["model"]})
