"""Transitivity in bipartite buyer-seller networks."""

__version__ = "0.1.0"
