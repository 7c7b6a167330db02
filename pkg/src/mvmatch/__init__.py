"""Differentiable multi-view keypoint matching and pose estimation."""

__version__ = "0.1.0"
