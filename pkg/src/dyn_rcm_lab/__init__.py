"""Simulation and verification tools for random walks in dynamic random conductance environments."""

__version__ = "0.1.0"
