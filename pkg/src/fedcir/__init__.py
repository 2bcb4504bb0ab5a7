"""Federated learning of client-invariant representations on synthetic feature-shifted data."""

__version__ = "0.1.0"
