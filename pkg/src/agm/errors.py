"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: ConfigError -> 2,
DataError (and subclasses) -> 3, NumericError -> 4.
"""


class AgmError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(AgmError):
    """Invalid configuration value or combination."""


class DataError(AgmError):
    """Invalid data: bad shapes, missing files, broken dataset layout."""


class ModalityError(DataError):
    """An operation received an image of the wrong modality."""


class NumericError(AgmError):
    """A numeric failure such as a non-finite loss."""
