"""Exception types shared across the package."""


class ZSADError(Exception):
    """Base class for errors raised by this package."""


class DomainError(ZSADError, ValueError):
    """A numeric input lies outside the domain of an operation."""


class UsageError(ZSADError, ValueError):
    """An API was called with inconsistent shapes or missing state."""


class InputError(ZSADError, ValueError):
    """User-supplied data violates a documented contract."""


class FormatError(ZSADError, ValueError):
    """A file does not follow its expected binary or text format."""

    def __init__(self, message: str, offset: int | None = None) -> None:
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigError(ZSADError, ValueError):
    """A configuration value or template is invalid."""


class MetricError(ZSADError, ValueError):
    """A metric is undefined for the given labels."""
