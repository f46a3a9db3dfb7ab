"""Parametric survival regression with ODE-defined hazards."""

__version__ = "0.1.0"
