"""Difference in differences inference with few treated units."""

__version__ = "0.1.0"
