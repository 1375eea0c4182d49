"""Exception types raised across the package."""


class MCDMError(Exception):
    """Base class for all package errors."""


class ConfigurationError(MCDMError, ValueError):
    """Bad or missing configuration (manifest, config keys, dataset layout)."""


class PreconditionError(MCDMError, ValueError):
    """An operation was called with arguments outside its contract."""


class StoreFormatError(MCDMError, ValueError):
    """A binary store is malformed (bad magic, version, truncation, dims)."""


class PseudoLabelMissingError(MCDMError, KeyError):
    """A pseudo ground truth entry (embedding or flow) was not found."""


class MissingArtifactError(MCDMError, FileNotFoundError):
    """A pipeline stage needs an artifact that an earlier stage produces."""

    def __init__(self, message: str, stage: str | None = None):
        super().__init__(message)
        self.stage = stage


class NumericalError(MCDMError, ArithmeticError):
    """Non-finite values or ill-conditioned inputs in a numeric kernel."""
