"""Replay-based class-incremental semantic segmentation on a synthetic benchmark."""

__version__ = "0.1.0"
