"""Depth-guided set-prediction detector for monocular 3-D object detection."""

__version__ = "0.1.0"
