"""Anomalous-edge detection on attributed behavior graphs."""

__version__ = "0.1.0"
