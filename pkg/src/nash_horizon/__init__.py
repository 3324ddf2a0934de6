"""Finite-N laboratory for weighted-decay estimates and short-time Nash systems."""

__version__ = "0.1.0"
