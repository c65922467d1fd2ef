"""Inception-style CNN engine and logo recognition pipeline on numpy."""

__version__ = "0.1.0"
