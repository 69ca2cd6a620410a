"""Numerical laboratory for the L-infinity Rayleigh quotient on grid domains."""

__version__ = "0.1.0"
