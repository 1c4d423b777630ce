"""Pose refinement for rigid objects represented as 3D Gaussian clouds."""

__version__ = "0.1.0"
