"""Exception taxonomy shared by all modules.

The CLI maps these onto its exit codes: schema-class errors (SchemaError and
subclasses, ProtocolError) exit 2, I/O errors exit 3, ConfigError exits 4.
"""


class SegmilcbmError(Exception):
    """Base class for all package-defined errors."""


class SchemaError(SegmilcbmError):
    """Data violates an invariant of the bag/manifest data model."""


class ParseError(SchemaError):
    """A line of an input file is not valid JSON or is truncated."""

    def __init__(self, message: str, line_number: int | None = None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class FormatError(SchemaError):
    """File carries an unsupported format version or wrong header."""


class ProtocolError(SegmilcbmError):
    """An evaluation protocol requirement is not met (e.g. missing severity)."""


class ConfigError(SegmilcbmError):
    """A configuration value violates its declared range or is unknown."""


class NumericalError(SegmilcbmError):
    """A non-finite value appeared where finite math is required."""
