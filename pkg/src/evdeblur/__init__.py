"""Event-guided single-image motion deblurring with a KANLinear-attention U-Net."""

__version__ = "0.1.0"
