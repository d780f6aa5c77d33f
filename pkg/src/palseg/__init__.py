"""Panoramic annular image unfolding and lightweight aerial scene segmentation."""

__version__ = "0.1.0"
