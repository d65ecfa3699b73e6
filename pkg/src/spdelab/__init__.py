"""Numerical laboratory for distribution-function-valued SPDEs."""

__version__ = "0.1.0"
