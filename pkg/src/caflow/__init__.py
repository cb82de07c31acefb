"""Adaptive-depth single-step flow matching for x4 super-resolution."""

__version__ = "0.1.0"
