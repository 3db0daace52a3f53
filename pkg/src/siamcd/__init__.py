"""Semi-supervised urban change detection with dual-task Siamese difference networks."""

__version__ = "0.1.0"
