"""Federated low-rank adaptive learning on a numpy substrate."""

__version__ = "0.1.0"
