"""Offline CLIP-style feature exporter for the tsal360 engine."""

__version__ = "0.1.0"
