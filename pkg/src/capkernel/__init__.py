"""Latent kernel graph models with measurable, targetable spectral capacity."""

__version__ = "0.1.0"
