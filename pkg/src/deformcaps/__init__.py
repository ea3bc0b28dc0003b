"""Deformable capsule object detector at desk scale."""

__version__ = "0.1.0"
