"""Organ volume estimation from one or two 2D cross-sectional segmentations."""

__version__ = "0.1.0"
