"""Chordal SLE via the Loewner equation: Green's function martingales,
conditioned samplers and the natural parametrization."""

from .core import McEstimate, SleParams

__all__ = ["SleParams", "McEstimate"]
__version__ = "0.1.0"
