"""Billiard map of the infinite-horizon periodic Lorentz gas and measures with infinite Lyapunov exponents."""

__version__ = "0.1.0"
