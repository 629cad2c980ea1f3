"""Aligned grayscale modality pipeline for visible-infrared person retrieval."""

from .errors import AgmError, ConfigError, DataError, ModalityError, NumericError

__all__ = ["AgmError", "ConfigError", "DataError", "ModalityError", "NumericError"]
__version__ = "0.1.0"
