"""Per-(node kind, feature) standardisation fitted on training events."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from ..errors import DataError
from .events import DEFINED, N_FEATURES, EventGraph, NodeKind


@dataclass(eq=False)
class FeatureScaler:
    mean: np.ndarray  # (7, 6), rows indexed by NodeKind
    std: np.ndarray

    def to_dict(self) -> dict:
        return {
            "mean": {k.label: [float(v) for v in self.mean[k]] for k in NodeKind},
            "std": {k.label: [float(v) for v in self.std[k]] for k in NodeKind},
        }

    @classmethod
    def from_dict(cls, obj) -> "FeatureScaler":
        try:
            mean = np.array([obj["mean"][k.label] for k in NodeKind], dtype=np.float64)
            std = np.array([obj["std"][k.label] for k in NodeKind], dtype=np.float64)
        except (KeyError, TypeError) as exc:
            raise DataError(f"malformed scaler: missing {exc}") from None
        if mean.shape != (len(NodeKind), N_FEATURES) or std.shape != mean.shape:
            raise DataError("malformed scaler: grids must be 7x6")
        return cls(mean, std)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "FeatureScaler":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def __eq__(self, other) -> bool:
        return (isinstance(other, FeatureScaler) and np.array_equal(self.mean, other.mean)
                and np.array_equal(self.std, other.std))


def fit_scaler(events: Sequence[EventGraph]) -> FeatureScaler:
    sums = np.zeros((len(NodeKind), N_FEATURES))
    sq = np.zeros_like(sums)
    counts = np.zeros(len(NodeKind))
    for ev in events:
        idx = list(ev.kinds)
        sums[idx] += ev.features
        counts[idx] += 1
    for k in NodeKind:
        if counts[k] < 2:
            raise DataError(f"need at least 2 events containing {k.label} to fit the scaler, got {int(counts[k])}")
    mean = sums / counts[:, None]
    # second pass for a numerically clean variance
    for ev in events:
        d = ev.features - mean[list(ev.kinds)]
        sq[list(ev.kinds)] += d * d
    std = np.sqrt(sq / counts[:, None])
    for k in NodeKind:
        for c in range(N_FEATURES):
            if DEFINED[k, c] and not std[k, c] > 0:
                raise DataError(f"zero variance in defined cell {k.label}.F{c + 1}")
    mean = np.where(DEFINED, mean, 0.0)
    std = np.where(DEFINED, std, 1.0)
    return FeatureScaler(mean, std)


def apply_scaler(scaler: FeatureScaler, ev: EventGraph) -> np.ndarray:
    idx = list(ev.kinds)
    return (ev.features - scaler.mean[idx]) / scaler.std[idx]
