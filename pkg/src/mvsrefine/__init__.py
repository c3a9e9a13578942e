"""Learned multi-view depth refinement by candidate selection."""

__version__ = "0.1.0"
