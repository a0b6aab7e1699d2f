"""Numerical maximum-principle toolkit for partially observed mean-field control."""

__version__ = "0.1.0"
