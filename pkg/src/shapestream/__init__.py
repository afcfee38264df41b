"""Streaming multi-view 3D shape completion at toy voxel resolution."""

__version__ = "0.1.0"
