"""Weakly supervised audio-visual semantic segmentation by progressive cross-modal alignment."""

__version__ = "0.1.0"
