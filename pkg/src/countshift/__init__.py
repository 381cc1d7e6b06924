"""Unsupervised cross-domain building counting with density-map regression."""

__version__ = "0.1.0"
