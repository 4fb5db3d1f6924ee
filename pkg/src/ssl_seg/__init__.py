"""Semi-supervised 3D multi-organ segmentation on a light separable UNet."""

__version__ = "0.1.0"
