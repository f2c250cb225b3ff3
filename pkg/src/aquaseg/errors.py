"""Exception hierarchy shared across the pipeline.

The CLI maps these onto exit codes: validation problems exit 1, missing
upstream artifacts exit 2, numerical divergence exits 3.
"""


class AquasegError(Exception):
    """Base class for all package errors."""


class ValidationError(AquasegError):
    """Bad inputs: config keys, dataset layout, shapes, unknown mask colors."""


class ConfigError(ValidationError):
    """Structured config file failed validation."""


class MaskColorError(ValidationError):
    """A mask pixel binarized to a color code outside the class map."""


class CacheCorruptError(ValidationError):
    """An embedding cache entry or checkpoint failed its integrity checks."""


class MissingArtifactError(AquasegError):
    """An upstream artifact (manifest, cache, checkpoint) is absent."""

    def __init__(self, message: str, producer: str | None = None):
        if producer:
            message = f"{message}; run `aquaseg {producer}` first"
        super().__init__(message)
        self.producer = producer


class DivergenceError(AquasegError):
    """Non-finite values appeared in a forward pass, loss, or gradient."""
