"""Dual-teacher self-learning segmentation on synthetic multi-phase phantoms."""
__version__ = "0.1.0"
