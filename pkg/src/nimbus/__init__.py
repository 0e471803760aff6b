"""Desk-scale latent-diffusion ensemble forecasting on synthetic gridded fields."""

__version__ = "0.1.0"
