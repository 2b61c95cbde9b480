"""Mask search for memorization-aware fine-tuning of a small conditional diffusion model."""

__version__ = "0.1.0"
