"""Chebyshev-linearized parametric message passing for cooperative positioning."""

__version__ = "0.1.0"
