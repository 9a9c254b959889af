"""Desk-scale visual abductive reasoning pipeline."""

__version__ = "0.1.0"
