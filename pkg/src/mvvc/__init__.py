"""Multi-view volumetric water classification and water-surface filling."""

__version__ = "0.1.0"

from .errors import (  # noqa: F401
    ConfigError, FormatError, InsufficientDataError, MissingArtifactError, MVVCError,
    NumericalError, ShapeError,
)
