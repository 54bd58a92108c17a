"""Equivariant neural operator for volumetric electron density, plus a
graphon-spectral laboratory validating its continuous-convolution reading."""

__version__ = "0.1.0"
