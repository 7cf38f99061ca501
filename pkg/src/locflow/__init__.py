"""Numerical laboratory for the cutoff-localized Ricci flow."""

__version__ = "0.1.0"
