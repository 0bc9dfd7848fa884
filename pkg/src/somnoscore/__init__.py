"""Depthwise-separable CNN sleep-stage scoring on single- and multi-signal polysomnograms."""

__version__ = "0.1.0"
