"""Membership-inference lab for semantic segmentation models."""

__version__ = "0.1.0"
