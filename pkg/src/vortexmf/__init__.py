"""Stochastic point-vortex mean-field lab."""

__version__ = "0.1.0"
