"""Class-conditional domain adaptation for semantic segmentation, at desk scale."""

__version__ = "0.1.0"
