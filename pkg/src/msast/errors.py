"""Exception types shared across the package.

Each CLI exit code maps onto one of these (see cli.py), so library code
raises the most specific class it can and never calls sys.exit itself.
"""


class MsastError(Exception):
    """Base class for all package errors."""


class ShapeError(MsastError):
    """Operands have incompatible shapes; message names both shapes."""


class ConfigError(MsastError):
    """Invalid configuration value or unknown config key."""


class DataError(MsastError):
    """Malformed dataset content (labels, lengths, class ids)."""


class FileFormatError(MsastError):
    """Malformed binary file: bad magic, truncation, or shape mismatch."""


class NumericError(MsastError):
    """Non-finite loss or gradient encountered during training."""


class ModeError(MsastError):
    """Operation invoked on a model of the wrong causality mode."""
