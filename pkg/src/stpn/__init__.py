"""Prompted video-frame encoders, their predictors and a synthetic test bench."""
__version__ = "0.1.0"
