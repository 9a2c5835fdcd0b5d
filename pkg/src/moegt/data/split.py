"""Stratified train/test partitioning."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from ..errors import DataError, ParameterError
from .events import EventGraph, Label


def split(events: Sequence[EventGraph], fractions=(0.8, 0.2), seed: int = 0):
    """Split into parts with the given fractions, stratified by label.

    Each class is shuffled with its own permutation and cut at rounded
    cumulative fractions, so part sizes are exact when counts divide evenly.
    Returns one list per fraction, each in original input order.
    """
    fractions = tuple(float(f) for f in fractions)
    if any(f < 0 for f in fractions) or not math.isclose(sum(fractions), 1.0, abs_tol=1e-9):
        raise ParameterError(f"fractions must be non-negative and sum to 1, got {fractions}")
    rng = np.random.default_rng(seed)
    labels = np.array([int(ev.label) for ev in events])
    assignment = np.empty(len(events), dtype=int)
    cum = np.cumsum(fractions)
    for label in (Label.BACKGROUND, Label.SIGNAL):
        idx = np.flatnonzero(labels == label)
        if idx.size == 0:
            raise DataError(f"no {label.name.lower()} events to split")
        idx = idx[rng.permutation(idx.size)]
        cuts = np.rint(cum * idx.size).astype(int)
        start = 0
        for part, stop in enumerate(cuts):
            assignment[idx[start:stop]] = part
            start = stop
    return tuple([events[i] for i in np.flatnonzero(assignment == p)] for p in range(len(fractions)))
