"""Transformer and sparse mixture-of-experts building blocks.

Gating follows noisy top-k routing: per node, logits ``H = x W_g + eps *
softplus(x W_noise)`` (noise only while training), keep the k largest,
softmax over them.  Only the selected experts run.  The balancing loss is
``w_load * CV(load)^2`` where each expert's load is the summed probability,
under re-drawn noise, that it stays in the node's top-k.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, NumericError, ParameterError
from .tensor import Tensor

NEG_INF = -1e30

# degenerate-case counters (e.g. zero mean load); inspected by tests and logs
warnings = Counter()


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, name: str | None = None) -> Tensor:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, (fan_in, fan_out)), requires_grad=True, name=name)


def zeros(shape, name: str | None = None) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, name=name)


def ones(shape, name: str | None = None) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True, name=name)


# --- attention ---------------------------------------------------------------

@dataclass
class AttentionLayerParams:
    """Per-head projections are column blocks of the d_model x d_model matrices."""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    ln_gain: Tensor
    ln_bias: Tensor
    n_heads: int

    @property
    def d_model(self) -> int:
        return self.w_q.shape[0]


def check_heads(d_model: int, n_heads: int) -> int:
    if n_heads < 1 or d_model % n_heads:
        raise ConfigError(f"d_model={d_model} is not divisible by n_heads={n_heads}")
    return d_model // n_heads


def grouped_attention(x: Tensor, groups: Sequence[tuple[int, int]], p: AttentionLayerParams, *,
                      capture: bool = False, residual_norm: bool = True, dropout: float = 0.0,
                      training: bool = False, rng: np.random.Generator | None = None):
    """Self-attention over node rows that belong to several same-size graph groups.

    ``x`` stacks the rows of every group, each group being ``(B, N)`` graphs
    stored event-major.  Attention only mixes nodes of the same graph.
    Returns the updated rows and, if ``capture``, one ``(B, H, N, N)`` weight
    array per group.
    """
    m, d = x.shape
    h = p.n_heads
    dk = check_heads(d, h)
    if p.w_q.shape != (d, d):
        raise DimensionError(f"attention weights are {list(p.w_q.shape)}, input width is {d}")
    if sum(b * n for b, n in groups) != m:
        raise DimensionError(f"groups cover {sum(b * n for b, n in groups)} rows, input has {m}")
    projected = [x @ p.w_q, x @ p.w_k, x @ p.w_v]
    scale = 1.0 / math.sqrt(dk)
    contexts, captured = [], []
    start = 0
    for b, n in groups:
        if len(groups) > 1:
            blocks = [T.slice_rows(t, start, start + b * n) for t in projected]
        else:
            blocks = projected
        start += b * n
        # (B*N, d) -> (B, H, N, dk)
        q, k, v = (T.transpose(T.reshape(t, (b, n, h, dk)), (0, 2, 1, 3)) for t in blocks)
        weights = T.softmax_rows(T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * scale)
        contexts.append(T.reshape(T.transpose(T.matmul(weights, v), (0, 2, 1, 3)), (b * n, d)))
        if capture:
            captured.append(weights.data.copy())
    out = T.dropout(T.concat(contexts, axis=0) @ p.w_o, dropout, training, rng)
    if residual_norm:
        out = T.layer_norm(x + out, p.ln_gain, p.ln_bias)
    return out, (captured if capture else None)


def multi_head_attention(x: Tensor, p: AttentionLayerParams, *, capture: bool = False,
                         residual_norm: bool = True, dropout: float = 0.0, training: bool = False,
                         rng: np.random.Generator | None = None):
    """Self-attention over all node pairs of each graph.

    ``x`` is ``(N, d)`` for one graph or ``(B, N, d)`` for B graphs of equal
    size.  Returns the output (same shape) and, when ``capture`` is set, the
    attention weights as a ``(B, H, N, N)`` array (else ``None``).
    """
    shape = x.shape
    b, n, d = (1,) + shape if x.ndim == 2 else shape
    out, w = grouped_attention(T.reshape(x, (b * n, d)), [(b, n)], p, capture=capture,
                               residual_norm=residual_norm, dropout=dropout, training=training, rng=rng)
    return T.reshape(out, shape), (w[0] if capture else None)


# --- feed-forward and experts --------------------------------------------------

def ffn(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    if x.shape[-1] != w1.shape[0] or w1.shape[1] != w2.shape[0]:
        raise DimensionError(f"ffn shape mismatch: x {list(x.shape)}, W1 {list(w1.shape)}, W2 {list(w2.shape)}")
    return T.relu(x @ w1 + b1) @ w2 + b2


@dataclass
class ExpertParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


ACTIVATIONS = {"leaky_relu": T.leaky_relu, "relu": T.relu}


def expert_forward(x: Tensor, p: ExpertParams, *, activation: str = "leaky_relu", dropout: float = 0.0,
                   training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
    hidden = ACTIVATIONS[activation](x @ p.w1 + p.b1)
    return T.dropout(hidden @ p.w2 + p.b2, dropout, training, rng)


# --- routing -------------------------------------------------------------------

@dataclass
class GateParams:
    w_g: Tensor
    w_noise: Tensor
    k: int
    training_noise: bool = True

    @property
    def n_experts(self) -> int:
        return self.w_g.shape[1]


def top_k_order(h: np.ndarray) -> np.ndarray:
    """Column indices of each row sorted by decreasing value, ties by lowest index."""
    return np.argsort(-h, axis=-1, kind="stable")


def keep_top_k(v, k: int) -> np.ndarray:
    """Keep the ``k`` largest entries of each row of ``v``; others become NEG_INF."""
    v = np.asarray(v, dtype=np.float64)
    n = v.shape[-1]
    if not 1 <= k <= n:
        raise ParameterError(f"k must lie in [1, {n}], got {k}")
    order = top_k_order(v)
    keep = np.zeros(v.shape, dtype=bool)
    np.put_along_axis(keep, order[..., :k], True, axis=-1)
    return np.where(keep, v, NEG_INF)


def kth_excluding(h, k: int, i: int) -> float:
    """k-th largest entry of ``h`` once entry ``i`` is removed."""
    rest = np.delete(np.asarray(h, dtype=np.float64), i)
    if not 1 <= k <= rest.size:
        raise ParameterError(f"k={k} out of range after excluding one of {rest.size + 1} entries")
    return float(np.sort(rest)[::-1][k - 1])


@dataclass
class RoutingRecord:
    """Per-node routing for one MoE layer; arrays have one row per node."""

    gates: np.ndarray      # (M, n), exactly k nonzero per row
    selected: np.ndarray   # (M, k) expert indices, best first
    logits: np.ndarray     # (M, n) H(x), noisy when training
    clean_logits: np.ndarray  # (M, n) x W_g


@dataclass
class GateOutput:
    gates: Tensor
    clean: Tensor
    logits: Tensor
    noise_std: Tensor | None
    order: np.ndarray
    record: RoutingRecord


def noisy_gate(x: Tensor, p: GateParams, *, training: bool, rng: np.random.Generator | None = None,
               need_noise_std: bool = False) -> GateOutput:
    n = p.n_experts
    if not 1 <= p.k <= n:
        raise ConfigError(f"top-k must lie in [1, {n}], got {p.k}")
    clean = x @ p.w_g
    noise_std = None
    if (training and p.training_noise) or need_noise_std:
        noise_std = T.softplus(x @ p.w_noise)
    if training and p.training_noise:
        if rng is None:
            raise ParameterError("noisy gating in training mode needs an rng")
        logits = clean + noise_std * Tensor(rng.standard_normal(clean.shape))
    else:
        logits = clean
    order = top_k_order(logits.data)
    selected = order[:, :p.k]
    unselected = np.ones(logits.shape, dtype=bool)
    np.put_along_axis(unselected, selected, False, axis=1)
    gates = T.softmax_rows(T.masked_fill(logits, unselected, NEG_INF))
    record = RoutingRecord(gates.data.copy(), selected.copy(), logits.data.copy(), clean.data.copy())
    return GateOutput(gates, clean, logits, noise_std, order, record)


def moe_forward(x: Tensor, gate: GateOutput, experts: Sequence[ExpertParams], *, activation: str = "leaky_relu",
                dropout: float = 0.0, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
    """Gate-weighted sum of the selected experts' outputs, one row per node."""
    selected = gate.record.selected
    if selected.size and selected.max() >= len(experts):
        raise AssertionError(f"routing selected expert {selected.max()} but only {len(experts)} exist")
    m = x.shape[0]
    parts, rows_all = [], []
    for e, ex in enumerate(experts):
        rows = np.flatnonzero((selected == e).any(axis=1))
        if rows.size == 0:
            continue
        y = expert_forward(T.gather_rows(x, rows), ex, activation=activation, dropout=dropout,
                           training=training, rng=rng)
        g = T.reshape(T.take(gate.gates, rows, np.full(rows.size, e)), (rows.size, 1))
        parts.append(y * g)
        rows_all.append(rows)
    if not parts:
        return Tensor(np.zeros((m, experts[0].w2.shape[1])))
    return T.scatter_add_rows(T.concat(parts, axis=0), np.concatenate(rows_all), m)


def moe_dense(x: Tensor, gates: np.ndarray, experts: Sequence[ExpertParams], activation: str = "leaky_relu") -> np.ndarray:
    """Evaluate every expert on every node and weight by the full gate matrix.

    Reference path for checking :func:`moe_forward`; no dropout.
    """
    out = np.zeros((x.shape[0], experts[0].w2.shape[1]))
    for e, ex in enumerate(experts):
        out += gates[:, e:e + 1] * expert_forward(x, ex, activation=activation).data
    return out


def load_balance_loss(gate: GateOutput, k: int, w_load: float) -> Tensor:
    """``w_load * CV(load)^2`` over the nodes routed in ``gate``.

    Needs the gate's noise scale (computed whenever the gate ran noisily or
    with ``need_noise_std``).  With k equal to the expert count every expert
    is always selected and the loss is identically zero.
    """
    m, n = gate.clean.shape
    if k >= n or m == 0 or w_load == 0.0:
        return Tensor(0.0)
    if gate.noise_std is None:
        raise ParameterError("load_balance_loss needs the gate's noise scale")
    order = gate.order
    in_topk = np.zeros((m, n), dtype=bool)
    np.put_along_axis(in_topk, order[:, :k], True, axis=1)
    # threshold for selected experts: (k+1)-th value; for the others: k-th value
    thresh_col = np.where(in_topk, order[:, k:k + 1], order[:, k - 1:k])
    rows = np.repeat(np.arange(m), n)
    threshold = T.reshape(T.take(gate.logits, rows, thresh_col.ravel()), (m, n))
    prob = T.normal_cdf((gate.clean - threshold) / gate.noise_std)
    load = T.sum_axis(prob, axis=0)
    mean = T.mean_all(load)
    if mean.item() <= 0.0:
        warnings["zero_mean_load"] += 1
        return Tensor(0.0)
    var = T.mean_all(T.square(load - mean))
    loss = var / T.square(mean) * w_load
    if not math.isfinite(loss.item()):
        raise NumericError("load-balancing loss is not finite")
    return loss


def coefficient_of_variation(values) -> float:
    values = np.asarray(values, dtype=np.float64)
    mean = values.mean()
    return float(values.std() / mean) if mean > 0 else 0.0
