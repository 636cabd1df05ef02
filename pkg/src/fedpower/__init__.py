"""Constrained power allocation for federated learning over interfering wireless uplinks."""

__version__ = "0.1.0"
