"""Exception types shared across the package."""


class EvmafError(Exception):
    """Base class for all package errors."""


class MalformedInputError(EvmafError, ValueError):
    """Media or data file does not match its declared layout."""


class ConfigurationError(EvmafError, ValueError):
    """Inconsistent geometry, manifest or config settings."""


class DimensionError(EvmafError, ValueError):
    """Array too small or shaped wrongly for the requested operation."""


class InputError(EvmafError, ValueError):
    """Invalid arguments to a numerical routine (empty tables, bad ranges)."""


class ComputationError(EvmafError, ArithmeticError):
    """A computed quantity came out non-finite."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class TrainingError(EvmafError, RuntimeError):
    """Regressor training did not converge."""


class SchemaVersionError(EvmafError, ValueError):
    """A model or cache file carries an unsupported schema version."""
