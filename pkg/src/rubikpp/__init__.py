"""Volumetric cube-layer disarrangement and restoration pretraining."""

__version__ = "0.1.0"
