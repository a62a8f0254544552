"""Occlusion-aware deep appearance modelling and fitting."""

__version__ = "0.1.0"
