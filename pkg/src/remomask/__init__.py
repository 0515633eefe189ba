"""Desk-scale retrieval-augmented masked motion generation."""

__version__ = "0.1.0"
