"""Voxel semantic scene completion from depth and projected image features."""

__version__ = "0.1.0"
