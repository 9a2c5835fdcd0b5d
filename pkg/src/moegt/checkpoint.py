"""Self-describing JSON checkpoints.

A checkpoint holds the model configuration, every parameter (name, shape,
row-major values), the feature scaler and the seed lineage.  Floats are
written with ``repr`` precision and keys are sorted, so saving a loaded
checkpoint reproduces the original bytes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data.scaler import FeatureScaler
from .errors import DataError
from .models import Model, ModelConfig, model_class
from .tensor import Tensor

FORMAT = "moegt-checkpoint"
VERSION = 1


@dataclass
class Checkpoint:
    model: Model
    scaler: FeatureScaler
    lineage: dict = field(default_factory=dict)   # e.g. seed, data hash, training options

    def to_dict(self) -> dict:
        params = {name: {"shape": list(t.shape), "data": t.data.ravel().tolist()}
                  for name, t in self.model.params.items()}
        return {"format": FORMAT, "version": VERSION, "config": self.model.config.to_dict(),
                "params": params, "param_order": list(self.model.params), "scaler": self.scaler.to_dict(),
                "lineage": self.lineage}

    @classmethod
    def from_dict(cls, doc: dict) -> "Checkpoint":
        if doc.get("format") != FORMAT:
            raise DataError(f"not a checkpoint (format {doc.get('format')!r})")
        if doc.get("version") != VERSION:
            raise DataError(f"unsupported checkpoint version {doc.get('version')!r}")
        try:
            config = ModelConfig.from_dict(doc["config"])
            params = {}
            for name in doc["param_order"]:
                entry = doc["params"][name]
                data = np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
                params[name] = Tensor(data, requires_grad=True, name=name)
            scaler = FeatureScaler.from_dict(doc["scaler"])
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed checkpoint: {exc}") from exc
        return cls(model_class(config.kind)(config, params), scaler, dict(doc.get("lineage", {})))


def dumps(ckpt: Checkpoint) -> str:
    return json.dumps(ckpt.to_dict(), sort_keys=True, separators=(",", ":")) + "\n"


def save(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.write_text(dumps(ckpt), encoding="utf-8")
    return path


def load(path) -> Checkpoint:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise DataError(f"{path}: no such checkpoint") from exc
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: unreadable checkpoint: {exc}") from exc
    return Checkpoint.from_dict(doc)
