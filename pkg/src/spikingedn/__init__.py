"""Spiking encoder-decoder networks for event-camera semantic segmentation."""

__version__ = "0.1.0"
