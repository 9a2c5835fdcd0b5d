"""Binary classification metrics with signal as the positive class."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import DataError

METRIC_NAMES = ("accuracy", "precision", "recall", "f1", "auc")

_unit = {"type": "number", "minimum": 0, "maximum": 1}
_count = {"type": "integer", "minimum": 0}

# JSON schema of a serialised MetricsReport (the ``eval`` command's output)
METRICS_SCHEMA: dict = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "moegt metrics report",
    "type": "object",
    "additionalProperties": False,
    "required": [*METRIC_NAMES, "tp", "fp", "tn", "fn"],
    "properties": {**{m: _unit for m in METRIC_NAMES}, **{c: _count for c in ("tp", "fp", "tn", "fn")}},
}


class AucUndefinedError(DataError):
    """ROC AUC needs at least one positive and one negative example."""


def auc_score(scores, labels) -> float:
    """Area under the ROC curve via the Mann-Whitney rank statistic.

    Equals the fraction of (signal, background) pairs in which the signal
    scores higher, with ties counted as one half.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise DataError(f"scores {scores.shape} and labels {labels.shape} must be equal-length vectors")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise AucUndefinedError(f"AUC is undefined with {n_pos} signal and {n_neg} background events")
    ranks = rankdata(scores)  # average ranks for ties, so every rank is a multiple of 1/2
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    auc: float
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(**d)


def confusion_report(tp: int, fp: int, tn: int, fn: int, auc: float) -> MetricsReport:
    """Metrics from confusion counts; undefined ratios (0/0) are reported as 0."""
    total = tp + fp + tn + fn
    if total <= 0:
        raise DataError("cannot score an empty set")
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return MetricsReport((tp + tn) / total, precision, recall, f1, auc, int(tp), int(fp), int(tn), int(fn))


def classification_report(scores, labels, threshold: float = 0.5) -> MetricsReport:
    """Threshold ``scores`` (signal probability) and compute every metric.

    An event is predicted signal when its score is strictly above the
    threshold, which agrees with taking the argmax of two logits.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    auc = auc_score(scores, labels)
    pred = scores > threshold
    tp = int(np.sum(pred & labels))
    fp = int(np.sum(pred & ~labels))
    tn = int(np.sum(~pred & ~labels))
    fn = int(np.sum(~pred & labels))
    return confusion_report(tp, fp, tn, fn, auc)


@dataclass
class AggregateReport:
    """Per-seed reports with their mean and sample standard deviation."""

    seeds: list[int]
    runs: list[MetricsReport]
    mean: dict[str, float]
    std: dict[str, float]

    def to_dict(self) -> dict:
        return {"seeds": list(self.seeds), "runs": [r.to_dict() for r in self.runs],
                "mean": dict(self.mean), "std": dict(self.std)}


def aggregate(seeds, reports: list[MetricsReport]) -> AggregateReport:
    if not reports:
        raise DataError("no runs to aggregate")
    mean, std = {}, {}
    for name in METRIC_NAMES:
        values = np.array([getattr(r, name) for r in reports], dtype=np.float64)
        mean[name] = float(values.mean())
        std[name] = float(values.std(ddof=1)) if len(values) > 1 else 0.0
    return AggregateReport(list(seeds), list(reports), mean, std)
