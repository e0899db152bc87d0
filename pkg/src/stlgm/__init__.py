"""Spatiotemporal latent Gaussian models for event-level count and binary data."""

__version__ = "0.1.0"
