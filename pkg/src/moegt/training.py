"""Mini-batch training, evaluation and multi-seed experiments.

Every run derives four independent random streams from its seed (parameter
init, shuffling, gate noise / dropout, positional-encoding sign flips), so a
seed fully determines the trained parameters and the loss curve.
"""

from __future__ import annotations

import dataclasses
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .data.batching import EncodedDataset
from .data.events import EventGraph
from .data.scaler import FeatureScaler, fit_scaler
from .errors import ConfigError, DataError, NumericError
from .layers import (ExpertParams, GateParams, coefficient_of_variation, glorot, load_balance_loss,
                     moe_forward, noisy_gate, zeros)
from .metrics import AggregateReport, MetricsReport, aggregate, auc_score, classification_report
from .models import Model, ModelConfig, build_model, cross_entropy, signal_scores
from .optim import AdamState, adam_step
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    epochs: int = 60
    batch_size: int = 500
    w_load: float = 1.0
    lr: float = 1e-3
    lr_decay: float = 0.95      # multiplicative, applied once per epoch
    seeds: list[int] = field(default_factory=lambda: [0])
    eval_each_epoch: bool = True

    def validate(self) -> None:
        self.model.validate()
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.w_load < 0:
            raise ConfigError(f"w_load must be >= 0, got {self.w_load}")
        if self.lr <= 0 or not 0 < self.lr_decay <= 1:
            raise ConfigError(f"need lr > 0 and 0 < lr_decay <= 1, got {self.lr}, {self.lr_decay}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["model"] = self.model.to_dict()
        d["seeds"] = list(self.seeds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown training option(s): {', '.join(sorted(unknown))}")
        if "model" in d:
            d["model"] = ModelConfig.from_dict(d["model"])
        return cls(**d)


@dataclass
class EpochRecord:
    epoch: int
    ce_loss: float
    load_loss: float
    eval_auc: float | None


@dataclass
class TrainResult:
    model: Model
    seed: int
    history: list[EpochRecord]


class TrainingAborted(NumericError):
    """A non-finite value appeared during a training step."""

    def __init__(self, epoch: int, batch: int, detail: str):
        self.epoch, self.batch, self.detail = epoch, batch, detail
        super().__init__(f"training aborted at epoch {epoch}, batch {batch}: {detail}")


def run_streams(seed: int) -> dict[str, np.random.Generator]:
    names = ("init", "shuffle", "noise", "flips")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.default_rng(s) for n, s in zip(names, children)}


def prepare_datasets(train_events: Sequence[EventGraph], test_events: Sequence[EventGraph] | None,
                     pe_dim: int = 4, train_mask=None, test_mask=None, scaler: FeatureScaler | None = None):
    """Fit the scaler on the training events and encode both sets."""
    scaler = scaler or fit_scaler(train_events)
    train_ds = EncodedDataset(train_events, scaler, pe_dim, train_mask)
    test_ds = EncodedDataset(test_events, scaler, pe_dim, test_mask) if test_events is not None else None
    return scaler, train_ds, test_ds


def train(config: TrainConfig, train_set: EncodedDataset, seed: int, eval_set: EncodedDataset | None = None,
          model: Model | None = None, on_epoch: Callable[[EpochRecord], None] | None = None) -> TrainResult:
    """Train one model; returns it with per-epoch loss averages.

    The loss minimised is cross-entropy plus the load-balancing term of every
    MoE layer.  Epoch averages weight each batch by its event count.
    """
    config.validate()
    if len(train_set) == 0:
        raise DataError("training set is empty")
    streams = run_streams(seed)
    model = model or build_model(config.model, streams["init"])
    params = model.parameters()
    state = AdamState(lr=config.lr)
    history = []
    for epoch in range(config.epochs):
        state.lr = config.lr * config.lr_decay ** epoch
        order = streams["shuffle"].permutation(len(train_set))
        ce_sum = load_sum = 0.0
        for b, start in enumerate(range(0, len(order), config.batch_size)):
            batch = train_set.batch(order[start:start + config.batch_size], streams["flips"])
            try:
                with Tape() as tape:
                    res = model.forward(batch, training=True, rng=streams["noise"], w_load=config.w_load)
                    ce = cross_entropy(res.logits, batch.labels)
                    loss = ce + res.load_loss
                grads = tape.gradient(loss, params)
            except NumericError as exc:
                raise TrainingAborted(epoch, b, str(exc)) from exc
            for name, g in zip(model.params, grads):
                if not np.all(np.isfinite(g)):
                    raise TrainingAborted(epoch, b, f"non-finite gradient for {name}")
            adam_step(params, grads, state)
            ce_sum += ce.item() * batch.size
            load_sum += res.load_loss.item() * batch.size
        auc = None
        if eval_set is not None and config.eval_each_epoch:
            auc = evaluate(model, eval_set).auc
        rec = EpochRecord(epoch + 1, ce_sum / len(order), load_sum / len(order), auc)
        history.append(rec)
        log.info("seed %d epoch %d ce %.5f load %.5f auc %s", seed, rec.epoch, rec.ce_loss, rec.load_loss,
                 "-" if auc is None else f"{auc:.5f}")
        if on_epoch is not None:
            on_epoch(rec)
    return TrainResult(model, seed, history)


def predict_scores(model: Model, dataset: EncodedDataset, batch_size: int = 2000) -> np.ndarray:
    """Signal probability per event, in dataset order (inference mode)."""
    scores = np.empty(len(dataset))
    for batch in dataset.iter_batches(batch_size):
        scores[batch.index] = signal_scores(model.forward(batch).logits.data)
    return scores


def evaluate(model: Model, dataset: EncodedDataset, threshold: float = 0.5) -> MetricsReport:
    if len(dataset) == 0:
        raise DataError("test set is empty")
    return classification_report(predict_scores(model, dataset), dataset.labels, threshold)


@dataclass
class ExperimentResult:
    scaler: FeatureScaler
    runs: list[TrainResult]
    reports: list[MetricsReport]
    summary: AggregateReport


def _train_and_score(args):
    config, train_set, test_set, seed = args
    result = train(config, train_set, seed, eval_set=test_set)
    return result, evaluate(result.model, test_set)


def run_experiment(config: TrainConfig, train_events: Sequence[EventGraph], test_events: Sequence[EventGraph],
                   jobs: int = 1, train_mask=None, test_mask=None) -> ExperimentResult:
    """Independent training per seed, each scored on the test events.

    ``jobs > 1`` trains seeds in worker processes; results do not depend on it.
    """
    config.validate()
    scaler, train_set, test_set = prepare_datasets(train_events, test_events, config.model.pe_dim,
                                                   train_mask, test_mask)
    work = [(config, train_set, test_set, s) for s in config.seeds]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(work))) as pool:
            outcomes = list(pool.map(_train_and_score, work))
    else:
        outcomes = [_train_and_score(w) for w in work]
    runs = [o[0] for o in outcomes]
    reports = [o[1] for o in outcomes]
    return ExperimentResult(scaler, runs, reports, aggregate(config.seeds, reports))


# --- routing balance study --------------------------------------------------------

@dataclass
class BalanceOutcome:
    counts: np.ndarray     # inference-time top-k selections per expert
    cv: float
    task_loss: list[float]


def routing_balance_experiment(w_load: float, *, steps: int = 200, seed: int = 0, n_nodes: int = 512,
                               d_model: int = 16, n_experts: int = 6, k: int = 2, expert_size: int = 20,
                               bias: float = 5.0, lr: float = 0.025) -> BalanceOutcome:
    """Train a lone MoE layer from a gate biased towards expert 0.

    Inputs carry a constant feature in their last column; the gate weight
    linking it to expert 0 starts at ``bias`` so every node initially routes
    there.  The task regresses a fixed random teacher with squared error, plus
    ``w_load`` times the balancing loss.  Utilisation is counted from
    noise-free top-k routing after training.  Adam moves a weight by about
    ``lr`` per step, so the default ``lr`` is just enough to undo the bias
    within 200 steps.
    """
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n_nodes, d_model))
    x[:, -1] = 1.0
    target = np.tanh(x @ rng.standard_normal((d_model, d_model)) / np.sqrt(d_model))
    w_g = zeros((d_model, n_experts))
    w_g.data[-1, 0] = bias
    gate = GateParams(w_g, zeros((d_model, n_experts)), k)
    experts = []
    for _ in range(n_experts):
        experts.append(ExpertParams(glorot(rng, d_model, expert_size), zeros(expert_size),
                                    glorot(rng, expert_size, d_model), zeros(d_model)))
    params = [gate.w_g, gate.w_noise] + [t for e in experts for t in (e.w1, e.b1, e.w2, e.b2)]
    state = AdamState(lr=lr)
    xt = Tensor(x)
    task_loss = []
    for _ in range(steps):
        with Tape() as tape:
            g = noisy_gate(xt, gate, training=True, rng=rng)
            err = moe_forward(xt, g, experts) - Tensor(target)
            mse = T.mean_all(T.square(err))
            loss = mse + load_balance_loss(g, k, w_load)
        adam_step(params, tape.gradient(loss, params), state)
        task_loss.append(mse.item())
    selected = noisy_gate(xt, gate, training=False).record.selected
    counts = np.bincount(selected.ravel(), minlength=n_experts)
    return BalanceOutcome(counts, coefficient_of_variation(counts), task_loss)


__all__ = [
    "TrainConfig", "EpochRecord", "TrainResult", "TrainingAborted", "ExperimentResult", "BalanceOutcome",
    "run_streams", "prepare_datasets", "train", "predict_scores", "evaluate", "run_experiment",
    "routing_balance_experiment", "auc_score",
]
