"""Preference-conditioned diffusion planning for offline multi-objective control."""

__version__ = "0.1.0"
