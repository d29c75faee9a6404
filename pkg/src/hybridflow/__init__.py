"""Deterministic co-simulation toolkit for hybrid vehicular traffic."""

__version__ = "0.1.0"
