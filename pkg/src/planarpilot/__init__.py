"""Diffusion behavior planner-controller for a planar physics character."""

__version__ = "0.1.0"
