"""Colour correction for underwater images with a skip-connected encoder-decoder, on a numpy engine."""

__version__ = "0.1.0"
