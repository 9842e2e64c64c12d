"""
Exception hierarchy for the crimemap pipeline.

Library code raises these; the CLI maps them to exit codes. Validation
problems (bad config, degenerate input, mismatched shapes) exit with 1,
runtime failures (network, numerics, corrupt files) exit with 2.
"""

from typing import Any, Optional


class CrimeMapError(Exception):
    """Base class for all pipeline errors."""

    pass


class PipelineValidationError(CrimeMapError):
    """Input or configuration is unusable; the run cannot start."""

    pass


class ConfigError(PipelineValidationError):
    """Configuration file, override, or provider setting is invalid."""

    pass


class DegenerateInputError(PipelineValidationError):
    """Input is well-formed but too small or too uniform to process."""

    pass


class ShapeError(PipelineValidationError):
    """Array, grid, or sequence dimensions do not agree."""

    pass


class GeoRangeError(PipelineValidationError, ValueError):
    """Coordinate or cell index outside the supported range."""

    pass


class FetchError(CrimeMapError):
    """A tile could not be fetched after all retries."""

    def __init__(
        self, url: str, status: Optional[int] = None, message: Optional[str] = None
    ):
        self.url = url
        self.status = status
        default_msg = f"Tile fetch failed for {url} (status: {status})"
        self.message = message or default_msg
        super().__init__(self.message)


class ProviderMismatchError(CrimeMapError):
    """The provider returned an image that does not match the request."""

    pass


class DatasetBuildError(CrimeMapError):
    """Too many cells failed while building a dataset or a map."""

    pass


class NumericError(CrimeMapError):
    """A non-finite value appeared inside the network."""

    def __init__(self, layer_index: int, message: Optional[str] = None):
        self.layer_index = layer_index
        self.message = message or f"Non-finite values at layer {layer_index}"
        super().__init__(self.message)


class TrainingError(CrimeMapError):
    """Training aborted; carries the last good parameters when available."""

    def __init__(
        self,
        message: str,
        last_params: Any = None,
        split_index: Optional[int] = None,
    ):
        self.last_params = last_params
        self.split_index = split_index
        if split_index is not None:
            message = f"split {split_index}: {message}"
        super().__init__(message)


class CorruptModelError(CrimeMapError):
    """A model file failed magic, version, or checksum validation."""

    pass
