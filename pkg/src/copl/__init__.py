"""Contextual prompt learning over frozen stub encoders."""

__version__ = "0.1.0"
