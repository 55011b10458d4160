"""Adversarial patch generation with target-region-only augmentation."""

__version__ = "0.1.0"
