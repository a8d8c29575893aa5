"""Exception types shared across the package."""


class LifelearnError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(LifelearnError, ValueError):
    """Operand dimensions do not line up. Message carries both shapes."""


class EmptyInputError(LifelearnError, ValueError):
    """An operation that needs at least one element got none."""


class ConfigError(LifelearnError, ValueError):
    """A configuration value is missing, malformed, or out of range."""


class StreamParseError(LifelearnError, ValueError):
    """A stream file could not be parsed. Carries the offending line."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class StreamValidationError(LifelearnError, ValueError):
    """A parsed stream violates a structural requirement."""


class DivergenceError(LifelearnError, FloatingPointError):
    """Training produced a non-finite loss or gradient."""


class StageError(LifelearnError, RuntimeError):
    """A training stage was invoked out of order."""


class MemoryWriteError(LifelearnError, ValueError):
    """An episodic-memory slot was written twice."""


class MetricError(LifelearnError, ValueError):
    """A requested metric is undefined for the given inputs."""
