"""Relightable Gaussian splatting for outdoor photo collections."""

__version__ = "0.1.0"
