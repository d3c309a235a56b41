"""Implicit-field objects, visual interaction constraints and manipulation planning."""

__version__ = "0.1.0"
