"""Event graphs, ingestion, standardisation, positional encodings, toy data."""

from .events import (DEFINED, KINDS_6, KINDS_7, N_FEATURES, BackgroundKind, EventGraph, Label,
                     NodeKind, kinds_for, read_events, validate_event, write_events)
from .positional import laplacian_pe
from .scaler import FeatureScaler, apply_scaler, fit_scaler
from .split import split
from .synthetic import GeneratorConfig, generate_synthetic

__all__ = [
    "DEFINED", "KINDS_6", "KINDS_7", "N_FEATURES", "BackgroundKind", "EventGraph", "Label",
    "NodeKind", "kinds_for", "read_events", "validate_event", "write_events", "laplacian_pe",
    "FeatureScaler", "apply_scaler", "fit_scaler", "split", "GeneratorConfig", "generate_synthetic",
]
