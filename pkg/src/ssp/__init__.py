"""Supervised superpoint oversegmentation of point clouds."""

__version__ = "0.1.0"
