"""Exception hierarchy.

Every error raised on purpose by the library derives from :class:`QwellError`,
so callers (and the CLI) can map failures to exit codes without catching
unrelated exceptions.
"""


class QwellError(Exception):
    """Base class for all library errors."""


class InvalidTruncationError(QwellError, ValueError):
    pass


class NumericError(QwellError, ArithmeticError):
    """A numerical routine produced unusable output (NaN, failed solve, ...)."""


class EigenSolverError(NumericError):
    def __init__(self, message, condition=None):
        super().__init__(message)
        self.condition = condition


class DegeneracyError(NumericError):
    """A spectral gap is too small for a formula that divides by it."""

    def __init__(self, message, pair=None, gap=None):
        super().__init__(message)
        self.pair = pair
        self.gap = gap


class DomainError(QwellError, ValueError):
    pass


class ContractionError(NumericError):
    """The implicit field-strength iteration did not converge."""

    def __init__(self, message, last_iterates=None, ratio=None):
        super().__init__(message)
        self.last_iterates = last_iterates
        self.ratio = ratio


class ModeViolationError(NumericError):
    pass


class TruncationTooSmallError(QwellError, ValueError):
    pass


class PrepumpError(QwellError, RuntimeError):
    pass


class LyapunovIncreaseError(NumericError):
    def __init__(self, message, t=None, increase=None, tolerance=None):
        super().__init__(message)
        self.t = t
        self.increase = increase
        self.tolerance = tolerance


class SimulationDiverged(NumericError):
    def __init__(self, message, t=None, last_good=None):
        super().__init__(message)
        self.t = t
        self.last_good = last_good


class ConfigError(QwellError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
