"""Pathwise-gradient stochastic VI with control-variate variance reduction."""

__version__ = "0.1.0"
