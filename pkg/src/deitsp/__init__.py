"""Discrete-diffusion TSP solver."""

__version__ = "0.1.0"
