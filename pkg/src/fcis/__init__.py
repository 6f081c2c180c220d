"""Fully convolutional instance-aware semantic segmentation on a numpy autodiff core."""

__version__ = "0.1.0"
