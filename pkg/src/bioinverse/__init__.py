"""Coupled reaction-diffusion forward solvers and coefficient recovery from boundary data."""

__version__ = "0.1.0"
