"""Lesion-guided few weak-shot report generation."""
__version__ = "0.1.0"
