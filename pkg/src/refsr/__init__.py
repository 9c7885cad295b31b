"""Controllable reference-based diffusion super-resolution, desk scale."""

__version__ = "0.1.0"
