"""Guided pairwise KL-divergence metric learning with biometric evaluation protocols."""

__version__ = "0.1.0"
