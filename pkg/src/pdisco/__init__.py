"""Unsupervised part discovery with prototype attention over ViT patch features."""

__version__ = "0.1.0"
