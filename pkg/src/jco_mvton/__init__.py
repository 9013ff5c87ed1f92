"""Jointly-conditional multi-branch diffusion transformer for toy virtual try-on."""

__version__ = "0.1.0"
