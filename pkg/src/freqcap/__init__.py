"""Streaming CTR prediction with learned frequency capping and a GSP auction simulator."""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    FreqcapError,
    OrderingError,
    ParseError,
    SchemaError,
    SnapshotError,
    UndefinedMetricError,
)

__all__ = [
    "ConfigError",
    "FreqcapError",
    "OrderingError",
    "ParseError",
    "SchemaError",
    "SnapshotError",
    "UndefinedMetricError",
    "__version__",
]
