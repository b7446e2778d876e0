"""Mask-based mixing augmentation and mean-teacher training for semantic segmentation."""

__version__ = "0.1.0"
