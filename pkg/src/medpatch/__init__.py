"""Confidence-guided token patching with joint, missingness-aware and late fusion."""

__version__ = "0.1.0"
