"""Robust S/MM estimation and fast-and-robust bootstrap inference for SUR models."""

__version__ = "0.1.0"
