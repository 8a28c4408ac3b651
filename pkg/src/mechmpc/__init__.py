"""Mechanism-based distributed model predictive control."""

__version__ = "0.1.0"
