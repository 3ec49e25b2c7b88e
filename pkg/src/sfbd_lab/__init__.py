"""Deconvolution of Gaussian-corrupted data with diffusion models and exact oracles."""

__version__ = "0.1.0"
