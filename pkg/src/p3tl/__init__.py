"""Desk-scale laboratory for 3D transfer learning on point clouds."""

__version__ = "0.1.0"
