"""Pocket-conditioned molecule generation on voxel grids with walk-jump sampling."""

__version__ = "0.1.0"
