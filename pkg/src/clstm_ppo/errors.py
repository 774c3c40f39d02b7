"""Exception types shared across the package.

The CLI maps these onto process exit codes, so keep the hierarchy flat.
"""


class ClstmPpoError(Exception):
    """Base class for every error raised by this package."""


class DataError(ClstmPpoError):
    """Malformed, missing or inconsistent market data."""


class AlignmentError(DataError):
    """Tickers share no common trading calendar."""


class InsufficientHistoryError(DataError):
    """A series is too short for the requested computation."""


class NumericalError(ClstmPpoError):
    """Non-finite values, singular matrices or diverging training."""


class ContractError(ClstmPpoError):
    """An object was used outside its documented protocol."""


class ConfigError(ClstmPpoError):
    """Bad or unknown configuration keys."""
