"""Exception types raised across the toolkit."""


class CycleSEError(Exception):
    """Base class for all toolkit errors."""


class FormatError(CycleSEError, ValueError):
    """A file on disk does not match the expected binary or text layout."""


class UnsupportedFormatError(FormatError):
    """Valid container, but an encoding we do not read (8-bit WAV, stereo, ...)."""


class ConfigError(CycleSEError, ValueError):
    pass


class DimensionError(CycleSEError, ValueError):
    pass


class DegenerateStatsError(CycleSEError, ValueError):
    pass


class NumericError(CycleSEError, FloatingPointError):
    """A loss or gradient became non-finite. ``component`` names the culprit."""

    def __init__(self, component, message=None):
        self.component = component
        super().__init__(message or f"non-finite value in {component}")


class StateError(CycleSEError, RuntimeError):
    pass


class DataError(CycleSEError, ValueError):
    pass
