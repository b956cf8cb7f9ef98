"""Layered mesh-anchored Gaussian splatting for articulated avatars."""

__version__ = "0.1.0"
