"""Optical steel-rope inspection: RGB-D rope segmentation and damage classification."""

__version__ = "0.1.0"
