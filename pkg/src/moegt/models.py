"""Model assemblies: MGT, plain graph transformer, MLP and mean-pool GCN.

All four share the input layout (standardised features concatenated with
the Laplacian positional encoding) and a two-logit classification head.
Parameters live in an ordered ``name -> Tensor`` dict so checkpoints and the
optimizer see a stable ordering.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data.batching import MAX_NODES, Batch
from .data.events import N_FEATURES
from .errors import ConfigError, NumericError
from .layers import (AttentionLayerParams, ExpertParams, GateParams, RoutingRecord, check_heads, ffn,
                     glorot, grouped_attention, load_balance_loss, moe_forward, noisy_gate, ones, zeros)
from .tensor import Tensor

MODEL_KINDS = ("mgt", "gt", "mlp", "gcn")


@dataclass
class ModelConfig:
    kind: str = "mgt"
    hidden: int = 80
    heads: int = 2
    layers: int = 2
    experts: int = 6
    top_k: int = 2
    expert_size: int = 20
    ffn_size: int = 80
    pe_dim: int = 4
    dropout: float = 0.0
    expert_activation: str = "leaky_relu"
    mlp_hidden: tuple[int, int] = (80, 40)
    gcn_hidden: tuple[int, int] = (80, 40)

    def __post_init__(self):
        self.mlp_hidden = tuple(self.mlp_hidden)
        self.gcn_hidden = tuple(self.gcn_hidden)

    def validate(self) -> None:
        if self.kind not in MODEL_KINDS:
            raise ConfigError(f"unknown model kind {self.kind!r}; valid: {', '.join(MODEL_KINDS)}")
        if self.kind in ("mgt", "gt"):
            check_heads(self.hidden, self.heads)
        if not 1 <= self.top_k <= self.experts:
            raise ConfigError(f"top_k must lie in [1, experts={self.experts}], got {self.top_k}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")

    @property
    def d_in(self) -> int:
        return N_FEATURES + self.pe_dim

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["mlp_hidden"] = list(self.mlp_hidden)
        d["gcn_hidden"] = list(self.gcn_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model option(s): {', '.join(sorted(unknown))}")
        return cls(**d)


@dataclass
class ForwardResult:
    logits: Tensor                       # (B, 2), batch row order
    load_loss: Tensor                    # scalar; zero unless routing was trained
    routing: list[RoutingRecord] = field(default_factory=list)     # one per MoE layer
    attention: list[list[tuple[int, np.ndarray]]] = field(default_factory=list)
    # attention[layer] = [(n_nodes, weights (B_g, H, N, N)), ...] per batch group


def _linear(x: Tensor, params: dict, prefix: str) -> Tensor:
    return x @ params[prefix + ".w"] + params[prefix + ".b"]


class Model:
    """Parameter container plus a batched forward pass."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def parameter_count(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def forward(self, batch: Batch, *, training: bool = False, rng: np.random.Generator | None = None,
                capture: bool = False, w_load: float = 1.0) -> ForwardResult:
        raise NotImplementedError

    def copy(self) -> "Model":
        params = {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.params.items()}
        return type(self)(dataclasses.replace(self.config), params)


def _add_linear(params, rng, prefix, fan_in, fan_out):
    params[prefix + ".w"] = glorot(rng, fan_in, fan_out, prefix + ".w")
    params[prefix + ".b"] = zeros(fan_out, prefix + ".b")


class TransformerModel(Model):
    """Graph transformer; with ``kind == "mgt"`` each FFN is a routed MoE block."""

    @classmethod
    def init(cls, config: ModelConfig, rng: np.random.Generator) -> "TransformerModel":
        config.validate()
        d = config.hidden
        p: dict[str, Tensor] = {}
        _add_linear(p, rng, "input", config.d_in, d)
        for l in range(config.layers):
            a = f"layers.{l}.attn"
            for name in ("w_q", "w_k", "w_v", "w_o"):
                p[f"{a}.{name}"] = glorot(rng, d, d, f"{a}.{name}")
            p[f"{a}.ln_gain"] = ones(d, f"{a}.ln_gain")
            p[f"{a}.ln_bias"] = zeros(d, f"{a}.ln_bias")
            if config.kind == "mgt":
                g = f"layers.{l}.gate"
                p[f"{g}.w_g"] = zeros((d, config.experts), f"{g}.w_g")
                p[f"{g}.w_noise"] = zeros((d, config.experts), f"{g}.w_noise")
                for e in range(config.experts):
                    _add_linear(p, rng, f"layers.{l}.experts.{e}.l1", d, config.expert_size)
                    _add_linear(p, rng, f"layers.{l}.experts.{e}.l2", config.expert_size, d)
            else:
                _add_linear(p, rng, f"layers.{l}.ffn.l1", d, config.ffn_size)
                _add_linear(p, rng, f"layers.{l}.ffn.l2", config.ffn_size, d)
            p[f"layers.{l}.norm2.gain"] = ones(d, f"layers.{l}.norm2.gain")
            p[f"layers.{l}.norm2.bias"] = zeros(d, f"layers.{l}.norm2.bias")
        _add_linear(p, rng, "head", d, 2)
        return cls(config, p)

    def attention_params(self, l: int) -> AttentionLayerParams:
        a = f"layers.{l}.attn"
        p = self.params
        return AttentionLayerParams(p[f"{a}.w_q"], p[f"{a}.w_k"], p[f"{a}.w_v"], p[f"{a}.w_o"],
                                    p[f"{a}.ln_gain"], p[f"{a}.ln_bias"], self.config.heads)

    def gate_params(self, l: int) -> GateParams:
        g = f"layers.{l}.gate"
        return GateParams(self.params[f"{g}.w_g"], self.params[f"{g}.w_noise"], self.config.top_k)

    def expert_params(self, l: int) -> list[ExpertParams]:
        p = self.params
        return [ExpertParams(p[f"layers.{l}.experts.{e}.l1.w"], p[f"layers.{l}.experts.{e}.l1.b"],
                             p[f"layers.{l}.experts.{e}.l2.w"], p[f"layers.{l}.experts.{e}.l2.b"])
                for e in range(self.config.experts)]

    def forward(self, batch, *, training=False, rng=None, capture=False, w_load=1.0):
        cfg = self.config
        p = self.params
        d = cfg.hidden
        groups = [(g.x.shape[0], g.n_nodes) for g in batch.groups]
        x = np.concatenate([g.x.reshape(-1, cfg.d_in) for g in batch.groups], axis=0)
        h_all = _linear(Tensor(x), p, "input")
        load_loss = Tensor(0.0)
        routing, attention = [], []
        for l in range(cfg.layers):
            try:
                h_all, caps = grouped_attention(h_all, groups, self.attention_params(l), capture=capture,
                                                dropout=cfg.dropout, training=training, rng=rng)
                if capture:
                    attention.append([(n, w) for (_, n), w in zip(groups, caps)])
            except NumericError as exc:
                raise NumericError(f"layer {l} attention: {exc}") from exc
            try:
                if cfg.kind == "mgt":
                    gp = self.gate_params(l)
                    gate = noisy_gate(h_all, gp, training=training, rng=rng, need_noise_std=training)
                    y = moe_forward(h_all, gate, self.expert_params(l), activation=cfg.expert_activation,
                                    dropout=cfg.dropout, training=training, rng=rng)
                    routing.append(gate.record)
                    if training:
                        load_loss = load_loss + load_balance_loss(gate, gp.k, w_load)
                else:
                    y = ffn(h_all, p[f"layers.{l}.ffn.l1.w"], p[f"layers.{l}.ffn.l1.b"],
                            p[f"layers.{l}.ffn.l2.w"], p[f"layers.{l}.ffn.l2.b"])
                h_all = T.layer_norm(h_all + y, p[f"layers.{l}.norm2.gain"], p[f"layers.{l}.norm2.bias"])
            except NumericError as exc:
                raise NumericError(f"layer {l} {'moe' if cfg.kind == 'mgt' else 'ffn'}: {exc}") from exc
        pooled, start = [], 0
        for b, n in groups:
            rows = T.slice_rows(h_all, start, start + b * n) if len(groups) > 1 else h_all
            pooled.append(T.mean_axis(T.reshape(rows, (b, n, d)), axis=1))
            start += b * n
        pooled = T.concat(pooled, axis=0)
        return ForwardResult(_linear(pooled, p, "head"), load_loss, routing, attention)


class MlpModel(Model):
    """Flattened, zero-padded 7-row input through two hidden ReLU layers."""

    @classmethod
    def init(cls, config: ModelConfig, rng: np.random.Generator) -> "MlpModel":
        config.validate()
        h1, h2 = config.mlp_hidden
        p: dict[str, Tensor] = {}
        _add_linear(p, rng, "fc1", MAX_NODES * config.d_in, h1)
        _add_linear(p, rng, "fc2", h1, h2)
        _add_linear(p, rng, "head", h2, 2)
        return cls(config, p)

    @staticmethod
    def flatten(batch: Batch, d_in: int) -> np.ndarray:
        x = np.zeros((batch.size, MAX_NODES, d_in))
        for g in batch.groups:
            if g.n_nodes == 6:
                # J3 sits at row 2 in the 7-row layout
                x[g.positions[:, None], [0, 1, 3, 4, 5, 6]] = g.x
            else:
                x[g.positions] = g.x
        return x.reshape(batch.size, -1)

    def forward(self, batch, *, training=False, rng=None, capture=False, w_load=1.0):
        p = self.params
        x = Tensor(self.flatten(batch, self.config.d_in))
        h = T.relu(_linear(x, p, "fc1"))
        h = T.relu(_linear(h, p, "fc2"))
        return ForwardResult(_linear(h, p, "head"), Tensor(0.0))


class GcnModel(Model):
    """Two graph convolutions on the complete graph with self-loops, mean pool, linear head.

    With symmetric normalisation every node aggregates the mean over all
    nodes of its graph, so each convolution is ``ReLU(mean_nodes(H) W + b)``.
    """

    @classmethod
    def init(cls, config: ModelConfig, rng: np.random.Generator) -> "GcnModel":
        config.validate()
        h1, h2 = config.gcn_hidden
        p: dict[str, Tensor] = {}
        _add_linear(p, rng, "conv1", config.d_in, h1)
        _add_linear(p, rng, "conv2", h1, h2)
        _add_linear(p, rng, "head", h2, 2)
        return cls(config, p)

    def forward(self, batch, *, training=False, rng=None, capture=False, w_load=1.0):
        p = self.params
        pooled = []
        for g in batch.groups:
            b, n = g.x.shape[0], g.n_nodes
            h = Tensor(g.x)
            for conv in ("conv1", "conv2"):
                agg = T.mean_axis(h, axis=1, keepdims=True) * Tensor(np.ones((b, n, 1)))
                flat = T.reshape(agg, (b * n, agg.shape[-1]))
                h = T.reshape(T.relu(_linear(flat, p, conv)), (b, n, -1))
            pooled.append(T.mean_axis(h, axis=1))
        return ForwardResult(_linear(T.concat(pooled, axis=0), p, "head"), Tensor(0.0))


def build_model(config: ModelConfig, seed_or_rng) -> Model:
    rng = seed_or_rng if isinstance(seed_or_rng, np.random.Generator) else np.random.default_rng(seed_or_rng)
    config.validate()
    if config.kind in ("mgt", "gt"):
        return TransformerModel.init(config, rng)
    if config.kind == "mlp":
        return MlpModel.init(config, rng)
    return GcnModel.init(config, rng)


def model_class(kind: str):
    return TransformerModel if kind in ("mgt", "gt") else MlpModel if kind == "mlp" else GcnModel


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean of ``-log softmax(logits)[label]``; accepts one event (shape (2,)) or a batch."""
    labels = np.atleast_1d(np.asarray(labels, dtype=int))
    if logits.ndim == 1:
        logits = T.reshape(logits, (1, logits.shape[0]))
    logp = T.log_softmax_rows(logits)
    picked = T.take(logp, np.arange(len(labels)), labels)
    return T.mean_all(picked) * -1.0


def signal_scores(logits: np.ndarray) -> np.ndarray:
    """Softmax probability of the signal class (column 1)."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e[:, 1] / e.sum(axis=1)
