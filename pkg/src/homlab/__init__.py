"""Numerical homogenization laboratory for scaled generalized-Newtonian flow in perforated tori."""

__version__ = "0.1.0"
