"""U-Net segmentation with an anisotropic total-variation penalty, in plain numpy."""

__version__ = "0.1.0"
