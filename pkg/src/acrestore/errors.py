"""Exception hierarchy shared across the package."""


class AcRestoreError(Exception):
    """Base class for all package errors."""


class CaseFormatError(AcRestoreError):
    """A case or data file could not be parsed."""


class CaseValidationError(AcRestoreError):
    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class FingerprintMismatch(AcRestoreError):
    """Data produced for one network was paired with another."""


class PowerFlowError(AcRestoreError):
    """Newton power flow failed to converge.

    ``best`` holds the iterate with the smallest mismatch seen, ``mismatch``
    its infinity-norm mismatch.
    """

    def __init__(self, message, best=None, mismatch=float("nan"), iterations=0):
        super().__init__(message)
        self.best = best
        self.mismatch = mismatch
        self.iterations = iterations


class SingularJacobianError(PowerFlowError):
    def __init__(self, message, condition=float("inf"), **kwargs):
        super().__init__(message, **kwargs)
        self.condition = condition


class UnobservableError(AcRestoreError):
    """The weighted normal matrix is rank deficient."""

    def __init__(self, message, dimension):
        super().__init__(message)
        self.dimension = dimension


class TrainingError(AcRestoreError):
    pass


class ConvergenceError(AcRestoreError):
    """An inner restoration failed to converge."""
