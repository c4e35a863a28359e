"""Deterministic deep Q-learning with per-source control of randomness."""

__version__ = "0.1.0"
