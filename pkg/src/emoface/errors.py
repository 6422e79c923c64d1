"""Exception types shared across the pipeline."""


class ConfigurationError(ValueError):
    """A component was wired with incompatible dimensions or settings."""


class AudioFormatError(ValueError):
    """An audio file could not be decoded; message names the format."""


class CorpusError(RuntimeError):
    """A corpus file is missing, corrupt, or fails its hash check."""


class DegenerateGeometryError(ValueError):
    """Input points are too degenerate for a well-posed geometric fit."""
