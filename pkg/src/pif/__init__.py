"""Poisson influence factorization."""

__version__ = "0.1.0"
