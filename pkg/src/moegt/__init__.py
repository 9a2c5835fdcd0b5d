"""Mixture-of-experts graph transformer for collision-event classification."""

__version__ = "0.1.0"
