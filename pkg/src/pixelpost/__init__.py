"""Pixel-space supervision for latent diffusion post-training, at desk scale."""

__version__ = "0.1.0"
