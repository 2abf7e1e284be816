"""Exception hierarchy shared across the package."""


class DiaristError(Exception):
    """Base class for errors raised by this package."""


class ParseError(DiaristError):
    """Malformed text input (RTTM, UEM, config)."""


class FormatError(DiaristError):
    """Malformed binary file (features, checkpoints)."""


class NumericalError(DiaristError):
    """Non-finite values where finite ones are required."""
