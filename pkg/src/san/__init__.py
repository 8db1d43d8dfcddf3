"""Supervised adversarial networks for image saliency detection."""

__version__ = "0.1.0"
