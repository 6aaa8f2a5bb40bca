"""Desk-scale neural ranking laboratory."""

__version__ = "0.1.0"
