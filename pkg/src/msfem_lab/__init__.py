"""Multiscale finite element methods for advection-diffusion problems with oscillatory diffusion."""

__version__ = "0.1.0"
