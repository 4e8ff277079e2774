"""Discrete Dirichlet-Neumann laboratory on triangulated surfaces."""

__version__ = "0.1.0"
