"""Exception types shared across the package."""


class FreqcapError(Exception):
    """Base class for every error this package raises on purpose."""


class ConfigError(FreqcapError):
    """Invalid configuration value or file."""


class SchemaError(FreqcapError):
    """Feature schema violation (unknown value, wrong arity, bad identifier)."""


class ParseError(FreqcapError):
    """Malformed event-log or snapshot line."""

    def __init__(self, message: str, line_no: int | None = None, field: str | None = None):
        self.line_no = line_no
        self.field = field
        prefix = ""
        if line_no is not None:
            prefix += f"line {line_no}: "
        if field is not None:
            prefix += f"field {field!r}: "
        super().__init__(prefix + message)


class OrderingError(FreqcapError):
    """Stream events arrived out of time order."""


class UndefinedMetricError(FreqcapError):
    """Metric is undefined for the given input (empty, single-class, zero baseline)."""


class SnapshotError(FreqcapError):
    """Model or counter snapshot cannot be read back."""
