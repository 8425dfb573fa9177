"""Multi-scale U-Net segmentation with label-noise robust losses for whole-slide images."""

from .errors import ConfigError, ValidationError

__version__ = "0.1.0"

__all__ = ["ConfigError", "ValidationError", "__version__"]
