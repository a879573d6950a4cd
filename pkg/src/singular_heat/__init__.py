"""Numerics for heat equations with inverse-square boundary potentials."""

__version__ = "0.1.0"
