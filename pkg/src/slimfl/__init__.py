"""Federated learning over slimmable networks with superposition-coded uplinks."""

__version__ = "0.1.0"
