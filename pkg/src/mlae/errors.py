"""Exception hierarchy shared by every module."""


class MLAEError(Exception):
    """Base class for all package errors."""


class ShapeError(MLAEError, ValueError):
    pass


class NumericError(MLAEError, FloatingPointError):
    """A public operation produced NaN or Inf."""


class ParameterError(MLAEError, ValueError):
    pass


class ContractError(MLAEError, RuntimeError):
    """A caller violated a documented precondition (non-scalar loss, non-deterministic fn)."""


class StateError(MLAEError, RuntimeError):
    pass


class FormatError(MLAEError, ValueError):
    """Malformed config, checkpoint or dataset file."""


class CorruptCheckpointError(FormatError):
    """Blob content does not match the manifest hash."""
