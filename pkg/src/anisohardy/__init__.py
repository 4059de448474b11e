"""Desk-scale toolkit for weighted anisotropic product Hardy-space analysis."""

__version__ = "0.1.0"
