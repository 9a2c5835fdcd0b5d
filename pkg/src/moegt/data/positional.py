"""Laplacian eigenvector positional encodings for small graphs."""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from ..errors import ParameterError


def normalized_laplacian(adj: np.ndarray) -> np.ndarray:
    """``I - D^-1/2 A D^-1/2`` for a symmetric adjacency matrix."""
    deg = adj.sum(axis=1)
    inv_sqrt = np.where(deg > 0, 1.0 / np.sqrt(np.where(deg > 0, deg, 1.0)), 0.0)
    return np.eye(len(adj)) - inv_sqrt[:, None] * adj * inv_sqrt[None, :]


def _canonical_basis(vecs: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """Deterministic orthonormal basis of span(vecs).

    Projects e_1, e_2, ... onto the subspace and runs Gram-Schmidt, keeping
    each vector that adds a new direction.
    """
    proj = vecs @ vecs.T
    basis: list[np.ndarray] = []
    for e in np.eye(len(proj)):
        v = proj @ e
        for b in basis:
            v = v - (b @ v) * b
        norm = np.linalg.norm(v)
        if norm > tol:
            basis.append(v / norm)
        if len(basis) == vecs.shape[1]:
            break
    return np.stack(basis, axis=1)


def laplacian_eigenbasis(adj: np.ndarray, tol: float = 1e-8) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvalues (ascending) and a degeneracy-resolved eigenvector basis."""
    lap = normalized_laplacian(adj)
    vals, vecs = np.linalg.eigh(lap)
    out = np.empty_like(vecs)
    start = 0
    while start < len(vals):
        stop = start + 1
        while stop < len(vals) and vals[stop] - vals[start] < tol:
            stop += 1
        out[:, start:stop] = _canonical_basis(vecs[:, start:stop])
        start = stop
    return vals, out


@lru_cache(maxsize=None)
def _complete_graph_pe(n_nodes: int, d_pe: int) -> np.ndarray:
    adj = np.ones((n_nodes, n_nodes)) - np.eye(n_nodes)
    _, vecs = laplacian_eigenbasis(adj)
    pe = vecs[:, 1:1 + d_pe].copy()  # column 0 is the constant eigenvector
    pe.setflags(write=False)
    return pe


def laplacian_pe(n_nodes: int, d_pe: int = 4) -> np.ndarray:
    """Positional encoding rows for the complete graph on ``n_nodes`` nodes."""
    if n_nodes < d_pe + 1:
        raise ParameterError(f"need n_nodes >= d_pe + 1, got n_nodes={n_nodes}, d_pe={d_pe}")
    return _complete_graph_pe(n_nodes, d_pe)


def random_sign_flips(n_events: int, d_pe: int, rng: np.random.Generator) -> np.ndarray:
    """Per-event, per-column signs in {-1, +1}, each flipped with probability 1/2."""
    return np.where(rng.random((n_events, d_pe)) < 0.5, -1.0, 1.0)
