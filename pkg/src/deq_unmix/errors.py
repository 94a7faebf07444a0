"""Exception types raised across the package."""


class UnmixError(Exception):
    """Base class for all package errors."""


class DimensionError(UnmixError, ValueError):
    """Array shapes are inconsistent with the operation."""


class ConfigError(UnmixError, ValueError):
    """A configuration value is out of its valid range."""


class DomainError(UnmixError, ValueError):
    """An argument lies outside the mathematical domain of the operation."""


class ExtractionError(UnmixError):
    """Endmember extraction failed on degenerate data."""


class SolverError(UnmixError):
    """The forward fixed-point solve produced a non-finite iterate."""

    def __init__(self, message, iterate=None, iteration=None):
        super().__init__(message)
        self.iterate = iterate
        self.iteration = iteration


class BackwardError(UnmixError):
    """The Neumann-series adjoint accumulation diverged."""


class FormatError(UnmixError, ValueError):
    """A file on disk does not match its declared layout."""


class SchemaError(FormatError):
    """A JSON sidecar or checkpoint header is missing a required field."""
