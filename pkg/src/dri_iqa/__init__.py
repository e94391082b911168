"""Dual-representation no-reference image quality assessment with restoration assistance."""

__version__ = "0.1.0"
