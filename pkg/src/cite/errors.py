"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericError -> 4. Everything else is a plain bug and propagates.
"""


class CiteError(Exception):
    """Base class for all package errors."""


class ConfigError(CiteError):
    """Invalid configuration: bad preset, unknown key, bad dimensions."""


class ValidationError(CiteError):
    """Invalid value passed to an operation (bad box, bad label, bad count)."""


class DimensionError(ValidationError):
    """Shape mismatch between operands."""


class DataError(CiteError):
    """Missing, malformed, or corrupt data file."""


class CheckpointError(DataError):
    """Unreadable or incompatible model checkpoint."""


class NumericError(CiteError):
    """Non-finite value where a finite one is required."""


class ModeError(CiteError):
    """Operation called in the wrong assignment or train/infer mode."""


class StateError(CiteError):
    """Operation called in an invalid lifecycle state (e.g. backward before forward)."""
