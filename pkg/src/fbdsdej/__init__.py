"""Numerical solver for coupled forward-backward doubly stochastic equations with Poisson jumps."""

__version__ = "0.1.0"
