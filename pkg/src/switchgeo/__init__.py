"""Optimization-geometry toolkit for switching piecewise-linear surrogates."""
__version__ = "0.1.0"
