"""Geometrically consistent cost aggregation for multi-view stereo."""

__version__ = "0.1.0"
