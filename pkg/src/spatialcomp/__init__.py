"""Scalable Gaussian-process approximations for large gridded spatial data."""

__version__ = "0.1.0"
