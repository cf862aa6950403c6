"""Feature extraction from images to the FEAT1 binary format."""

__version__ = "0.1.0"
