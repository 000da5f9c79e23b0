"""Dual-domain low-dose CT denoising and metal artifact reduction toolkit."""

__version__ = "0.1.0"
