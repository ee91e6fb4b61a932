"""Modular image captioner on a synthetic scene corpus."""

__version__ = "0.1.0"
