"""Unsupervised clustering under domain shift with source-free target adaptation."""

__version__ = "0.1.0"
