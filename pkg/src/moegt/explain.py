"""Post-training analyses: averaged attention maps, expert routing counts,
feature-hiding ablation and b-pair kinematic diagnostics.

All analyses run the model in inference mode (no gate noise, no dropout).
"""

from __future__ import annotations

import csv
import enum
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import physics
from .data.batching import MAX_NODES, EncodedDataset
from .data.events import DEFINED, ETA, MASS, PHI, PT, EventGraph, Label, NodeKind, kinds_for
from .errors import ConfigError, DataError, EmptySubsetError
from .models import Model, TransformerModel
from .training import TrainConfig, predict_scores, run_experiment

# --- subsets -------------------------------------------------------------------


class Subset(enum.Enum):
    TRAIN_ALL = "train-all"
    TEST_ALL = "test-all"
    TEST_CORRECT_SIGNAL = "test-correct-signal"
    TEST_CORRECT_BACKGROUND = "test-correct-background"
    TEST_MISCLASSIFIED = "test-misclassified"


@dataclass(frozen=True)
class SubsetSelector:
    subset: Subset = Subset.TEST_ALL
    n_nodes: int | None = None   # 6, 7 or None for both

    def __post_init__(self):
        if self.n_nodes not in (None, 6, 7):
            raise ConfigError(f"node-count filter must be 6, 7 or none, got {self.n_nodes}")

    @property
    def name(self) -> str:
        return self.subset.value + ("" if self.n_nodes is None else f"/{self.n_nodes}-nodes")

    @property
    def source(self) -> str:
        return "train" if self.subset is Subset.TRAIN_ALL else "test"

    def accepts(self, event: EventGraph, predicted: Label) -> bool:
        if self.n_nodes is not None and event.n_nodes != self.n_nodes:
            return False
        s = self.subset
        if s in (Subset.TRAIN_ALL, Subset.TEST_ALL):
            return True
        if s is Subset.TEST_MISCLASSIFIED:
            return predicted != event.label
        wanted = Label.SIGNAL if s is Subset.TEST_CORRECT_SIGNAL else Label.BACKGROUND
        return predicted == event.label == wanted

    @classmethod
    def parse(cls, text: str, n_nodes: int | None = None) -> "SubsetSelector":
        try:
            return cls(Subset(text), n_nodes)
        except ValueError:
            valid = ", ".join(s.value for s in Subset)
            raise ConfigError(f"unknown subset {text!r}; valid: {valid}") from None


def predicted_labels(model: Model, dataset: EncodedDataset, threshold: float = 0.5) -> np.ndarray:
    return (predict_scores(model, dataset) > threshold).astype(int)


def select(dataset: EncodedDataset, selector: SubsetSelector, predictions: np.ndarray | None = None) -> np.ndarray:
    """Dataset indices accepted by ``selector``; raises if none are."""
    if predictions is None:
        predictions = np.zeros(len(dataset), dtype=int)
        if selector.subset not in (Subset.TRAIN_ALL, Subset.TEST_ALL):
            raise ConfigError(f"subset {selector.name} needs model predictions")
    index = np.array([i for i, ev in enumerate(dataset.events)
                      if selector.accepts(ev, Label(int(predictions[i])))], dtype=int)
    if index.size == 0:
        raise EmptySubsetError(f"subset {selector.name} selects no events")
    return index


# --- attention -----------------------------------------------------------------

@dataclass
class AttentionSummary:
    layer: int
    head: int
    n_nodes: int
    matrix: np.ndarray   # (N, N) mean attention weights, rows = querying node
    count: int           # events averaged

    @property
    def kinds(self) -> tuple[NodeKind, ...]:
        return kinds_for(self.n_nodes)


def _require_transformer(model: Model) -> TransformerModel:
    if not isinstance(model, TransformerModel):
        raise ConfigError(f"attention analysis needs a transformer model, got {model.config.kind}")
    return model


def aggregate_attention(model: Model, dataset: EncodedDataset, selector: SubsetSelector,
                        predictions: np.ndarray | None = None, batch_size: int = 2000) -> list[AttentionSummary]:
    """Mean attention map per (layer, head, node count) over the selected events."""
    _require_transformer(model)
    if predictions is None and selector.subset not in (Subset.TRAIN_ALL, Subset.TEST_ALL):
        predictions = predicted_labels(model, dataset)
    index = select(dataset, selector, predictions)
    sums: dict[tuple[int, int], np.ndarray] = {}
    counts: dict[int, int] = {}
    for start in range(0, index.size, batch_size):
        res = model.forward(dataset.batch(index[start:start + batch_size]), capture=True)
        for layer, groups in enumerate(res.attention):
            for n, w in groups:
                key = (layer, n)
                sums[key] = sums.get(key, 0.0) + w.sum(axis=0)
                if layer == 0:
                    counts[n] = counts.get(n, 0) + w.shape[0]
    out = []
    for (layer, n), total in sorted(sums.items()):
        for head in range(total.shape[0]):
            out.append(AttentionSummary(layer, head, n, total[head] / counts[n], counts[n]))
    return out


# --- expert specialisation -----------------------------------------------------

@dataclass
class SpecializationTable:
    counts: np.ndarray   # (layers, experts, 7): routing incidences per node kind
    nodes: np.ndarray    # (7,) nodes of each kind processed
    k: int
    weighted: bool = False

    @property
    def n_layers(self) -> int:
        return self.counts.shape[0]

    @property
    def n_experts(self) -> int:
        return self.counts.shape[1]

    def totals(self, layer: int) -> np.ndarray:
        """Column sums per node kind: ``k * nodes`` for counts, ``nodes`` when weighted."""
        return self.counts[layer].sum(axis=0)

    def distribution(self, layer: int, kind: NodeKind) -> np.ndarray:
        col = self.counts[layer, :, int(kind)].astype(np.float64)
        total = col.sum()
        return col / total if total > 0 else col

    def entropy(self, layer: int, kind: NodeKind) -> float:
        """Routing entropy (nats) of one node kind; ln(n_experts) for uniform routing."""
        p = self.distribution(layer, kind)
        p = p[p > 0]
        return float(-(p * np.log(p)).sum())

    def dominant_pair(self, layer: int, kind: NodeKind) -> tuple[tuple[int, int], float]:
        """The two experts receiving most of a kind's routing mass, and their share."""
        p = self.distribution(layer, kind)
        top = np.argsort(-p, kind="stable")[:2]
        return (int(min(top)), int(max(top))), float(p[top].sum())


def expert_specialization(model: Model, dataset: EncodedDataset, index: Sequence[int] | None = None,
                          weighted: bool = False, batch_size: int = 2000) -> SpecializationTable:
    """Count, per MoE layer, how often each expert is in a node's top-k.

    With ``weighted`` the gate values are summed instead of counting.
    """
    model = _require_transformer(model)
    cfg = model.config
    if cfg.kind != "mgt":
        raise ConfigError("expert specialisation needs an MGT model")
    index = np.arange(len(dataset)) if index is None else np.asarray(index, dtype=int)
    counts = np.zeros((cfg.layers, cfg.experts, len(NodeKind)))
    nodes = np.zeros(len(NodeKind), dtype=np.int64)
    for start in range(0, index.size, batch_size):
        batch = dataset.batch(index[start:start + batch_size])
        kinds = batch.node_kinds()
        nodes += np.bincount(kinds, minlength=len(NodeKind))
        res = model.forward(batch)
        for layer, rec in enumerate(res.routing):
            if weighted:
                for kind in range(len(NodeKind)):
                    counts[layer, :, kind] += rec.gates[kinds == kind].sum(axis=0)
            else:
                flat = rec.selected * len(NodeKind) + kinds[:, None]
                counts[layer] += np.bincount(flat.ravel(), minlength=cfg.experts * len(NodeKind)).reshape(
                    cfg.experts, len(NodeKind))
    if not weighted:
        counts = counts.astype(np.int64)
    return SpecializationTable(counts, nodes, cfg.top_k, weighted)


# --- feature hiding ----------------------------------------------------------

def parse_cell(name: str) -> tuple[NodeKind, int]:
    """``"b1.F1"`` -> (NodeKind.B1, 0).  Only cells defined for the node kind are accepted."""
    try:
        kind_name, feat = name.split(".")
        kind = NodeKind[kind_name.upper()]
        if feat[0] not in "Ff":
            raise ValueError
        col = int(feat[1:]) - 1
    except (ValueError, KeyError, IndexError):
        raise ConfigError(f"unknown feature {name!r}; expected <node>.F<n> such as b1.F1") from None
    if not 0 <= col < DEFINED.shape[1] or not DEFINED[kind, col]:
        raise ConfigError(f"unknown feature {name!r}: {kind.label} has no F{col + 1}")
    return kind, col


ALL_FEATURES = tuple(f"{k.label}.F{c + 1}" for k in NodeKind for c in range(DEFINED.shape[1]) if DEFINED[k, c])


def feature_mask(events: Sequence[EventGraph], names: Sequence[str], hide_copies: bool = True) -> np.ndarray:
    """Boolean ``(events, 7, 6)`` mask of cells to zero, in each event's row order.

    With ``hide_copies`` a hidden b-jet cell in F1-F4 is also hidden in any jet
    row that carries the same b-jet (jets j1..j3 include the b-jets).
    """
    cells = [parse_cell(n) for n in names]
    mask = np.zeros((len(events), MAX_NODES, DEFINED.shape[1]), dtype=bool)
    if not cells:
        return mask
    jets = (NodeKind.J1, NodeKind.J2, NodeKind.J3)
    for i, ev in enumerate(events):
        rows = {k: r for r, k in enumerate(ev.kinds)}
        for kind, col in cells:
            if kind not in rows:
                continue
            mask[i, rows[kind], col] = True
            if hide_copies and kind in (NodeKind.B1, NodeKind.B2) and col <= 3:
                b_row = ev.features[rows[kind], :4]
                for j in jets:
                    if j in rows and np.array_equal(ev.features[rows[j], :4], b_row):
                        mask[i, rows[j], col] = True
    return mask


@dataclass
class AblationRow:
    group: str
    features: tuple[str, ...]
    auc: float
    delta: float    # baseline AUC minus AUC with the group hidden


def feature_ablation(config: TrainConfig, train_events: Sequence[EventGraph], test_events: Sequence[EventGraph],
                     groups: dict[str, Sequence[str]], jobs: int = 1) -> tuple[float, list[AblationRow]]:
    """Retrain with each feature group zeroed in train and test data.

    Returns the baseline AUC (nothing hidden) and one row per group sorted by
    AUC drop, largest first.  AUCs are means over ``config.seeds``.
    """
    for names in groups.values():
        for n in names:
            parse_cell(n)

    def mean_auc(names):
        res = run_experiment(config, train_events, test_events, jobs=jobs,
                             train_mask=feature_mask(train_events, names),
                             test_mask=feature_mask(test_events, names))
        return res.summary.mean["auc"]

    baseline = mean_auc(())
    rows = []
    for group, names in groups.items():
        auc = baseline if not names else mean_auc(names)
        rows.append(AblationRow(group, tuple(names), auc, baseline - auc))
    rows.sort(key=lambda r: (-r.delta, r.group))
    return baseline, rows


# --- kinematic diagnostics -------------------------------------------------------

def delta_r(node_a, node_b) -> float:
    """Angular distance between two feature rows (uses F2 = eta, F3 = phi)."""
    return physics.delta_r(node_a[ETA], node_a[PHI], node_b[ETA], node_b[PHI])


def invariant_mass_bb(event: EventGraph) -> float:
    """Invariant mass (GeV) of the two b-jets."""
    b1, b2 = event.row(NodeKind.B1), event.row(NodeKind.B2)
    p1 = physics.four_vector(b1[PT], b1[ETA], b1[PHI], b1[MASS])
    p2 = physics.four_vector(b2[PT], b2[ETA], b2[PHI], b2[MASS])
    return physics.invariant_mass(p1, p2)


def diagnostics_rows(events: Sequence[EventGraph], scores) -> list[tuple]:
    """(index, label, score, delta_r_bb, m_bb) per event."""
    rows = []
    for i, (ev, s) in enumerate(zip(events, scores)):
        b1, b2 = ev.row(NodeKind.B1), ev.row(NodeKind.B2)
        rows.append((i, ev.label.name.lower(), float(s), delta_r(b1, b2), invariant_mass_bb(ev)))
    return rows


# --- export -----------------------------------------------------------------------

ATTENTION_HEADER = ("layer", "head", "n_nodes", "row_kind", "col_kind", "weight")
SPECIALIZATION_HEADER = ("layer", "expert", "node_kind", "count")
DIAGNOSTICS_HEADER = ("event", "label", "score", "delta_r_bb", "m_bb")
PIXELS_PER_CELL = 16


def _write_csv(path: Path, header, rows) -> Path:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
    path.write_text(buf.getvalue(), encoding="utf-8")
    return path


def _ensure_dir(path) -> Path:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {path}: {exc}") from exc
    return path


def heatmap_pgm(matrix: np.ndarray, cell: int = PIXELS_PER_CELL) -> bytes:
    """Binary greyscale image of a matrix, min-max scaled (brighter = larger)."""
    lo, hi = float(matrix.min()), float(matrix.max())
    if hi > lo:
        grey = np.rint(255.0 * (matrix - lo) / (hi - lo))
    else:
        grey = np.full(matrix.shape, 128.0)
    pixels = np.kron(grey.astype(np.uint8), np.ones((cell, cell), dtype=np.uint8))
    h, w = pixels.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    magic, dims, maxval, body = data.split(b"\n", 3)
    if magic != b"P5" or maxval != b"255":
        raise DataError(f"{path}: not an 8-bit binary PGM")
    w, h = (int(v) for v in dims.split())
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w)


def export_heatmap(summaries: Sequence[AttentionSummary], out_dir, prefix: str = "attention") -> list[Path]:
    """``<prefix>.csv`` with every cell plus one PGM per (layer, head, node count)."""
    out_dir = _ensure_dir(out_dir)
    rows, paths = [], []
    for s in summaries:
        kinds = s.kinds
        for r in range(s.n_nodes):
            for c in range(s.n_nodes):
                rows.append((s.layer, s.head, s.n_nodes, kinds[r].label, kinds[c].label, float(s.matrix[r, c])))
        img = out_dir / f"{prefix}_l{s.layer}_h{s.head}_n{s.n_nodes}.pgm"
        img.write_bytes(heatmap_pgm(s.matrix))
        paths.append(img)
    return [_write_csv(out_dir / f"{prefix}.csv", ATTENTION_HEADER, rows)] + paths


def read_attention_csv(path) -> dict[tuple[int, int, int], np.ndarray]:
    out: dict[tuple[int, int, int], np.ndarray] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            n = int(row["n_nodes"])
            key = (int(row["layer"]), int(row["head"]), n)
            m = out.setdefault(key, np.zeros((n, n)))
            kinds = [k.label for k in kinds_for(n)]
            m[kinds.index(row["row_kind"]), kinds.index(row["col_kind"])] = float(row["weight"])
    return out


def export_bars(table: SpecializationTable, out_dir, name: str = "specialization.csv") -> Path:
    out_dir = _ensure_dir(out_dir)
    rows = []
    for layer in range(table.n_layers):
        for e in range(table.n_experts):
            for kind in NodeKind:
                v = table.counts[layer, e, int(kind)]
                rows.append((layer, e, kind.label, float(v) if table.weighted else int(v)))
    return _write_csv(out_dir / name, SPECIALIZATION_HEADER, rows)


def read_specialization_csv(path) -> np.ndarray:
    """Inverse of :func:`export_bars`: ``(layers, experts, 7)`` counts."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    layers = 1 + max(int(r["layer"]) for r in rows)
    experts = 1 + max(int(r["expert"]) for r in rows)
    counts = np.zeros((layers, experts, len(NodeKind)))
    for r in rows:
        counts[int(r["layer"]), int(r["expert"]), int(NodeKind[r["node_kind"].upper()])] = float(r["count"])
    return counts


def export_diagnostics(events: Sequence[EventGraph], scores, out_dir, name: str = "diagnostics.csv") -> Path:
    return _write_csv(_ensure_dir(out_dir) / name, DIAGNOSTICS_HEADER, diagnostics_rows(events, scores))


def uniform_entropy(n_experts: int) -> float:
    return math.log(n_experts)
