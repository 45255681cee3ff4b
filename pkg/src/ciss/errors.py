"""Exception types shared across the package.

Everything raised intentionally by this package derives from CissError so the
CLI can map pipeline failures to a single exit code. Programming errors
(bad arguments, out-of-range boxes) raise plain ValueError instead.
"""

from __future__ import annotations


class CissError(Exception):
    """Base class for data and pipeline errors."""


class UnsupportedImageFormat(CissError):
    """File is not one of the supported image encodings (PNG, binary PPM)."""


class CorruptImageData(CissError):
    """Image header parsed but the payload is malformed or truncated."""


class ChannelMapError(CissError):
    """Channel-map file is malformed or inconsistent with its target image."""


class NoValidBins(CissError):
    """No distance bin reached the minimum pair count."""


class InsufficientBins(CissError):
    """Too few valid bins to fit a two-parameter curve."""


class ModelFormatError(CissError):
    """Model file is malformed, unsupported, or violates model invariants."""


class MissingScoreRaster(CissError):
    """Dense score provider has no raster for a requested (image, category)."""


class SceneGenerationError(CissError):
    """Synthetic scene constraints could not be satisfied."""


class ConfigError(CissError):
    """Run configuration is malformed or references missing inputs."""


class InputDataError(CissError):
    """An input data file (JSONL, CSV) is malformed."""
