"""Dual-control reference trajectory generation for uncertain payloads."""

__version__ = "0.1.0"
