"""Diffusion-based minimally-supervised text-to-speech at desk scale."""
__version__ = "0.1.0"
