"""Anatomy-guided token-wise self-supervised learning for radiograph-like images."""

__version__ = "0.1.0"
