"""Pre-standardised event arrays and mixed 6/7-node mini-batches.

A batch keeps 6-node and 7-node events in separate dense groups (attention
runs per group, no masking).  Node rows of the whole batch are ordered group
by group, event-major, which is the row order routing records use.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .events import N_FEATURES, EventGraph, kinds_for
from .positional import laplacian_pe, random_sign_flips
from .scaler import FeatureScaler, apply_scaler

MAX_NODES = 7


@dataclass
class Group:
    n_nodes: int
    x: np.ndarray          # (B, N, 6 + d_pe): standardised features then positional encoding
    positions: np.ndarray  # (B,) row of each event within the batch


@dataclass
class Batch:
    groups: list[Group]
    labels: np.ndarray     # (B,) in batch order
    index: np.ndarray      # (B,) dataset index of each batch row

    @property
    def size(self) -> int:
        return len(self.labels)

    def node_kinds(self) -> np.ndarray:
        """NodeKind value of every node row, in batch node order."""
        return np.concatenate([np.tile([int(k) for k in kinds_for(g.n_nodes)], len(g.positions))
                               for g in self.groups]) if self.groups else np.zeros(0, dtype=int)

    def node_events(self) -> np.ndarray:
        """Batch row of the event owning each node row."""
        return np.concatenate([np.repeat(g.positions, g.n_nodes) for g in self.groups]) \
            if self.groups else np.zeros(0, dtype=int)


class EncodedDataset:
    """Events standardised once; batches are sliced out of dense arrays."""

    def __init__(self, events: Sequence[EventGraph], scaler: FeatureScaler, d_pe: int = 4,
                 feature_mask: np.ndarray | None = None):
        self.events = list(events)
        self.d_pe = d_pe
        n = len(self.events)
        self.n_nodes = np.array([ev.n_nodes for ev in self.events], dtype=int)
        self.labels = np.array([int(ev.label) for ev in self.events], dtype=int)
        self.features = np.zeros((n, MAX_NODES, N_FEATURES))
        for i, ev in enumerate(self.events):
            self.features[i, :ev.n_nodes] = apply_scaler(scaler, ev)
        if feature_mask is not None:
            # feature_mask: (n_events, 7, 6) booleans of cells to hide, in node-row order
            self.features[feature_mask] = 0.0

    def __len__(self) -> int:
        return len(self.events)

    def batch(self, index: Sequence[int], flip_rng: np.random.Generator | None = None) -> Batch:
        index = np.asarray(index, dtype=int)
        groups, order = [], []
        start = 0
        for n in (6, 7):
            sel = index[self.n_nodes[index] == n]
            if sel.size == 0:
                continue
            pe = np.broadcast_to(laplacian_pe(n, self.d_pe), (sel.size, n, self.d_pe))
            if flip_rng is not None:
                pe = pe * random_sign_flips(sel.size, self.d_pe, flip_rng)[:, None, :]
            x = np.concatenate([self.features[sel, :n], pe], axis=-1)
            groups.append(Group(n, x, np.arange(start, start + sel.size)))
            order.append(sel)
            start += sel.size
        order = np.concatenate(order) if order else np.zeros(0, dtype=int)
        return Batch(groups, self.labels[order], order)

    def iter_batches(self, batch_size: int, flip_rng=None, index=None):
        index = np.arange(len(self)) if index is None else np.asarray(index)
        for s in range(0, len(index), batch_size):
            yield self.batch(index[s:s + batch_size], flip_rng)

