"""Periodic homogenization of reactive transport in porous media with drift."""

__version__ = "0.1.0"
