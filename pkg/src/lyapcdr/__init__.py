"""Lyapunov-consistent SBP discretizations of convection-diffusion-reaction systems."""

__version__ = "0.1.0"
