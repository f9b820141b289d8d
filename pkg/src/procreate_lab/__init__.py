"""Desk-scale diffusion sampling with propulsive-energy guidance on Gaussian mixtures."""

__version__ = "0.1.0"
