"""Spectral laboratory for the forced beta-plane equation on the 2-torus."""

__version__ = "0.1.0"
