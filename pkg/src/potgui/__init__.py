"""Trajectory-guided training of a pixel-wise segmentation head."""

__version__ = "0.1.0"
