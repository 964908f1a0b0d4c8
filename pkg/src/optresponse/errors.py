"""Exception hierarchy shared by all modules.

The CLI maps these onto exit codes, so every numerical failure should raise
one of the subclasses of :class:`OptResponseError`.
"""


class OptResponseError(Exception):
    """Base class for all library errors."""


class InvalidParameterError(OptResponseError, ValueError):
    pass


class InvalidInputError(OptResponseError, ValueError):
    pass


class AssemblyError(OptResponseError):
    """Quadrature did not reach the requested tolerance on some cell."""

    def __init__(self, msg, cell=None):
        super().__init__(msg)
        self.cell = cell


class GridMismatchError(OptResponseError, ValueError):
    pass


class SpectralError(OptResponseError):
    pass


class DegeneracyError(SpectralError):
    pass


class EigenvalueNotFoundError(SpectralError):
    pass


class LinearAlgebraError(SpectralError):
    pass


class PreconditionError(OptResponseError, ValueError):
    pass


class InfeasibleError(OptResponseError):
    pass


class DegenerateObjectiveError(OptResponseError):
    pass


class StepTooLargeError(OptResponseError):
    def __init__(self, msg, max_delta):
        super().__init__(msg)
        self.max_delta = max_delta


class ConfigError(OptResponseError, ValueError):
    pass
