"""Exception hierarchy shared by the pipeline modules."""
from typing import Optional


class GeoPulseError(Exception):
    """Base class for every error raised on purpose by geopulse."""


class ConfigError(GeoPulseError, ValueError):
    """Invalid run configuration: unknown timezone, bad flag values, bad synth config."""


class InsufficientData(GeoPulseError, ValueError):
    """Not enough points, dates or counts to compute a result."""

    def __init__(self, message: str, key: Optional[object] = None):
        super().__init__(message)
        self.key = key


class PatternFormatError(GeoPulseError):
    """A pattern file does not follow the documented schema."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path
        self.message = message


class PatternMissing(GeoPulseError, KeyError):
    """No SlotPattern was trained for the requested key."""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "pattern missing"


class ContractViolation(GeoPulseError, ValueError):
    """A caller broke a documented precondition."""
