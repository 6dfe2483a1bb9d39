"""Spectral reflectance and illuminant estimation from V-cavity interreflections."""

__version__ = "0.1.0"
