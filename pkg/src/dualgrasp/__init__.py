"""Dual-arm grasp-pair generation by guided score diffusion on SE(3) x SE(3)."""

__version__ = "0.1.0"
