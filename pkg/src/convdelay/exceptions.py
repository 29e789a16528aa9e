"""Exception hierarchy.

Every fitting error can carry a ``stage`` label (e.g. ``"step1"``) so that
multi-stage estimators report where they failed, and optimisation errors carry
the best :class:`~convdelay.numerics.OptimizationResult` reached so far.
"""


class ConvDelayError(Exception):
    """Base class for all package errors."""

    def __init__(self, message="", *, stage=None, result=None):
        super().__init__(message)
        self.stage = stage
        self.result = result

    def with_stage(self, stage):
        self.stage = stage if self.stage is None else f"{stage}/{self.stage}"
        return self

    def __str__(self):
        msg = super().__str__()
        return f"[{self.stage}] {msg}" if self.stage else msg


class NumericalError(ConvDelayError):
    """Base class for optimisation failures."""


class NonConvergence(NumericalError):
    pass


class SeparationDetected(NumericalError):
    pass


class RankDeficient(NumericalError):
    pass


class NonFiniteObjective(NumericalError):
    pass


class SingularJacobian(NumericalError):
    pass


class InfeasibleAdjustment(NumericalError):
    pass


class ShapeOutOfRange(NumericalError):
    pass


class EmptyFitSet(ConvDelayError):
    pass


class CalibrationFailed(ConvDelayError):
    pass


class ConfigError(ConvDelayError, ValueError):
    pass


class DataError(ConvDelayError, ValueError):
    pass


class FileUnreadable(DataError):
    pass


class TooManyMalformedLines(DataError):
    pass


class EmptyInput(DataError):
    pass
