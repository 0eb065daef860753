"""Grasp pose diffusion on SO(3) x R^3 with an analytic grasp oracle."""

__version__ = "0.1.0"
