"""Confidence-aware cross pseudo supervision with Fourier amplitude mixing, on a numpy autograd."""

__version__ = "0.1.0"
