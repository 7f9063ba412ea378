"""Memorization audit for 3D latent diffusion models at desk scale."""

__version__ = "0.1.0"
