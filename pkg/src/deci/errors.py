"""Exception types shared across the package.

The CLI maps these onto exit codes: configuration and usage problems exit 1,
data and file-format problems exit 2, numerical failures exit 3.
"""


class DimensionError(ValueError):
    """Operands have non-conforming or empty dimensions."""


class ConfigError(ValueError):
    """A configuration value violates its documented range or relationship."""


class ParseError(ValueError):
    """A serialized input could not be parsed; carries the 1-based line number."""

    def __init__(self, message: str, line_number: int | None = None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class ValidationError(ValueError):
    """Parsed data is structurally valid but violates a domain constraint."""


class FormatError(ValueError):
    """A binary artifact (checkpoint) has a bad magic, version, or length."""


class EvaluationError(ValueError):
    """A requested metric is undefined for the given inputs."""


class NumericalError(ArithmeticError):
    """A computation produced a non-finite value where one is not allowed."""
