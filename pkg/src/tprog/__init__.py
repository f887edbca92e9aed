"""Transformers whose weights decode into discrete, readable programs."""

__version__ = "0.1.0"
