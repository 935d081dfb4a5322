"""Federated learning under data-injection attacks, with median-based detection and trust voting."""

__version__ = "0.1.0"
