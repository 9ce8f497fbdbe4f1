"""Exception types shared across the package."""


class SurError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(SurError):
    """Operand shapes are incompatible or an input is empty."""


class NumericError(SurError):
    """Non-finite values where finite ones are required."""


class RangeError(SurError):
    """An index (step, layer, ...) is outside its valid range."""


class VocabularyError(SurError):
    """A token id falls outside the vocabulary."""


class ConfigError(SurError):
    """A configuration value violates its contract."""


class DataError(SurError):
    """A dataset record is missing or inconsistent."""


class FormatError(SurError):
    """A persisted file has the wrong magic, version, or hash."""


class StatsError(SurError):
    """A statistical routine received degenerate input."""


class TapeError(SurError):
    """Misuse of the gradient tape (detached loss, double backward, ...)."""
