"""Particle-filter metrology with policy-gradient control optimization."""

__version__ = "0.1.0"
