"""Joint semi-supervised classification and segmentation with a saliency bridge."""

__version__ = "0.1.0"
