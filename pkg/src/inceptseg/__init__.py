"""InceptNet-style segmentation engine built on numpy."""

__version__ = "0.1.0"
