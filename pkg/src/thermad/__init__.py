"""Thermographic antenna-array testing with conditional encoder-decoder models."""

__version__ = "0.1.0"
