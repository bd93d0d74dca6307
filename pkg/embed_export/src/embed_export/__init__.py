"""Frozen-backbone embedding export in the SVEM interchange format."""

__version__ = "0.1.0"
