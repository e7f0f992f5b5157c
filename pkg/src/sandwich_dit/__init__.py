"""Sandwich diffusion-transformer kernels, architecture search, losses and streaming inference."""

__version__ = "0.1.0"
