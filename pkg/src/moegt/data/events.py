"""Event graph model and the JSONL event format.

One event per line::

    {"label": "signal", "bkg_kind": null,
     "nodes": [{"kind": "j1", "f": [pt, eta, phi, quantile, mass, sigma]}, ...]}

Nodes appear in canonical order and undefined cells hold 0.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ..errors import DataError, EventParseError

N_FEATURES = 6


class NodeKind(enum.IntEnum):
    J1 = 0
    J2 = 1
    J3 = 2
    B1 = 3
    B2 = 4
    LEPTON = 5
    ENERGY = 6

    @property
    def label(self) -> str:
        return self.name.lower()


class Label(enum.IntEnum):
    BACKGROUND = 0
    SIGNAL = 1


class BackgroundKind(enum.Enum):
    TTBAR = "ttbar"
    SINGLETOP = "singletop"


KINDS_6 = (NodeKind.J1, NodeKind.J2, NodeKind.B1, NodeKind.B2, NodeKind.LEPTON, NodeKind.ENERGY)
KINDS_7 = (NodeKind.J1, NodeKind.J2, NodeKind.J3, NodeKind.B1, NodeKind.B2, NodeKind.LEPTON, NodeKind.ENERGY)


def kinds_for(n_nodes: int) -> tuple[NodeKind, ...]:
    if n_nodes == 6:
        return KINDS_6
    if n_nodes == 7:
        return KINDS_7
    raise DataError(f"node count must be 6 or 7, got {n_nodes}")


# feature columns: pT (or ETmiss), eta, phi, b-tag quantile, mass, sigma(ETmiss)
PT, ETA, PHI, QUANTILE, MASS, SIGMA = range(N_FEATURES)

# which (kind, feature) cells carry a physical value
DEFINED = np.zeros((len(NodeKind), N_FEATURES), dtype=bool)
DEFINED[[NodeKind.J1, NodeKind.J2, NodeKind.J3], :4] = True
DEFINED[[NodeKind.B1, NodeKind.B2], :5] = True
DEFINED[NodeKind.LEPTON, :3] = True
DEFINED[NodeKind.ENERGY, [PT, PHI, SIGMA]] = True


@dataclass(eq=False)
class EventGraph:
    kinds: tuple[NodeKind, ...]
    features: np.ndarray  # (n_nodes, 6), raw physical units
    label: Label
    bkg_kind: BackgroundKind | None = None

    @property
    def n_nodes(self) -> int:
        return len(self.kinds)

    def row(self, kind: NodeKind) -> np.ndarray:
        return self.features[self.kinds.index(kind)]

    def __eq__(self, other) -> bool:
        if not isinstance(other, EventGraph):
            return NotImplemented
        return (self.kinds == other.kinds and self.label == other.label
                and self.bkg_kind == other.bkg_kind
                and np.array_equal(self.features, other.features))


def validate_event(ev: EventGraph) -> list[str]:
    """Problems with ``ev``; an empty list means every invariant holds."""
    problems = []
    n = len(ev.kinds)
    if n not in (6, 7):
        return [f"node count must be 6 or 7, got {n}"]
    if tuple(ev.kinds) != kinds_for(n):
        problems.append("nodes not in canonical order " + ",".join(k.label for k in kinds_for(n)))
        return problems
    f = ev.features
    if f.shape != (n, N_FEATURES):
        return [f"feature matrix has shape {f.shape}, expected ({n}, {N_FEATURES})"]
    if not np.all(np.isfinite(f)):
        problems.append("non-finite feature value")
        return problems
    for i, kind in enumerate(ev.kinds):
        row = f[i]
        undefined = ~DEFINED[kind]
        if np.any(row[undefined] != 0):
            cols = ",".join(f"F{c + 1}" for c in np.flatnonzero(undefined & (row != 0)))
            problems.append(f"{kind.label}: undefined cell(s) {cols} must be 0")
        if row[PT] < 0:
            problems.append(f"{kind.label}: negative pT/ETmiss {row[PT]}")
        if DEFINED[kind, PHI] and not (-math.pi < row[PHI] <= math.pi):
            problems.append(f"{kind.label}: phi {row[PHI]} outside (-pi, pi]")
        if DEFINED[kind, QUANTILE] and not (0.0 <= row[QUANTILE] <= 1.0):
            problems.append(f"{kind.label}: quantile {row[QUANTILE]} outside [0, 1]")
        if DEFINED[kind, MASS] and row[MASS] < 0:
            problems.append(f"{kind.label}: negative mass {row[MASS]}")
        if DEFINED[kind, SIGMA] and row[SIGMA] < 0:
            problems.append(f"{kind.label}: negative sigma(ETmiss) {row[SIGMA]}")
    if ev.label == Label.SIGNAL and ev.bkg_kind is not None:
        problems.append("signal event must have bkg_kind null")
    return problems


def event_from_dict(obj) -> EventGraph:
    """Build an EventGraph from one decoded JSON object; raises ValueError."""
    if not isinstance(obj, dict):
        raise ValueError("event must be a JSON object")
    for key in ("label", "nodes"):
        if key not in obj:
            raise ValueError(f"missing required field {key!r}")
    try:
        label = {"signal": Label.SIGNAL, "background": Label.BACKGROUND}[obj["label"]]
    except (KeyError, TypeError):
        raise ValueError(f"label must be 'signal' or 'background', got {obj['label']!r}") from None
    raw_bkg = obj.get("bkg_kind")
    try:
        bkg = None if raw_bkg is None else BackgroundKind(raw_bkg)
    except ValueError:
        raise ValueError(f"bkg_kind must be 'ttbar', 'singletop' or null, got {raw_bkg!r}") from None
    nodes = obj["nodes"]
    if not isinstance(nodes, list):
        raise ValueError("nodes must be a list")
    if len(nodes) not in (6, 7):
        raise ValueError(f"node count must be 6 or 7, got {len(nodes)}")
    kinds, rows = [], []
    for j, node in enumerate(nodes):
        if not isinstance(node, dict) or "kind" not in node or "f" not in node:
            raise ValueError(f"node {j}: missing required field 'kind' or 'f'")
        try:
            kinds.append(NodeKind[str(node["kind"]).upper()])
        except KeyError:
            raise ValueError(f"node {j}: unknown kind {node['kind']!r}") from None
        f = node["f"]
        if (not isinstance(f, list) or len(f) != N_FEATURES
                or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in f)):
            raise ValueError(f"node {j}: 'f' must be a list of {N_FEATURES} numbers")
        rows.append([float(v) for v in f])
    ev = EventGraph(tuple(kinds), np.array(rows, dtype=np.float64), label, bkg)
    problems = validate_event(ev)
    if problems:
        raise ValueError("; ".join(problems))
    return ev


def event_to_dict(ev: EventGraph) -> dict:
    return {
        "label": "signal" if ev.label == Label.SIGNAL else "background",
        "bkg_kind": None if ev.bkg_kind is None else ev.bkg_kind.value,
        "nodes": [{"kind": k.label, "f": [float(v) for v in row]} for k, row in zip(ev.kinds, ev.features)],
    }


def parse_lines(lines: Iterable[str], source: str = "<lines>") -> list[EventGraph]:
    events, problems = [], []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            events.append(event_from_dict(json.loads(line)))
        except ValueError as exc:  # json.JSONDecodeError is a ValueError
            problems.append((lineno, str(exc)))
    if problems:
        raise EventParseError(source, problems)
    return events


def read_events(path) -> list[EventGraph]:
    """Read and validate a JSONL event file."""
    path = Path(path)
    try:
        text = path.read_bytes().decode("utf-8")
    except FileNotFoundError:
        raise DataError(f"{path}: no such file") from None
    except UnicodeDecodeError as exc:
        raise DataError(f"{path}: not valid UTF-8 ({exc.reason} at byte {exc.start})") from None
    return parse_lines(text.splitlines(), str(path))


def dumps_event(ev: EventGraph) -> str:
    return json.dumps(event_to_dict(ev), separators=(",", ":"))


def write_events(events: Sequence[EventGraph], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ev in events:
            fh.write(dumps_event(ev))
            fh.write("\n")
