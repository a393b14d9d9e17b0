"""Exception types shared across the pipeline."""


class PipelineError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(PipelineError):
    """Invalid inputs, parameters, or inconsistent configuration."""


class TensorFormatError(PipelineError):
    """Malformed or corrupt tensor file."""


class ImageDecodeError(PipelineError):
    """An image file could not be decoded."""


class ConfigMismatchError(ValidationError):
    """Artifacts produced under different configurations were mixed."""
