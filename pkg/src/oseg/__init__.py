"""On-line instance segmentation on pre-extracted convolutional features."""

__version__ = "0.1.0"
