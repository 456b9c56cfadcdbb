"""Exception and warning types shared across the package."""


class PtqLabError(Exception):
    """Base class for all package errors."""


class ShapeError(PtqLabError):
    """Operand shapes are incompatible for the requested operation."""


class RankError(PtqLabError):
    """Tensor rank is invalid for the operation (e.g. backward on a non-scalar)."""


class StaleTapeError(PtqLabError):
    """Backward was invoked twice on the same recorded graph without a reset."""


class ConfigError(PtqLabError):
    """Invalid experiment, model, or dataset configuration."""


class TopologyError(PtqLabError):
    """Model graph violates a structural precondition (e.g. orphan batchnorm)."""


class HookError(PtqLabError):
    """A forward hook returned a tensor of the wrong shape."""


class NumericsError(PtqLabError):
    """A numerical failure that aborts a run (e.g. NaN loss during reconstruction)."""


class NumericsWarning(UserWarning):
    """Non-fatal numerical diagnostic (division by zero, non-finite op output)."""
