"""Desk-scale simulator of closed-loop prompt refinement for a toy conditional diffusion model."""

__version__ = "0.1.0"
