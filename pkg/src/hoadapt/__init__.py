"""Metric-aware r-adaption of curved high-order simplicial meshes."""

__version__ = "0.1.0"
