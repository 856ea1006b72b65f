"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class BetaPlaneError(Exception):
    exit_code = 1


class PreconditionError(BetaPlaneError, ValueError):
    """Input outside the admissible parameter region."""

    exit_code = 2


class ResonanceError(PreconditionError):
    """A small divisor fell below its admissible lower bound."""

    def __init__(self, message, index=None, divisor=None):
        super().__init__(message)
        self.index = index
        self.divisor = divisor


class TruncationOverflowError(PreconditionError):
    pass


class SmallnessError(PreconditionError):
    """A perturbative step was asked to run outside its smallness regime."""

    def __init__(self, message, measured=None):
        super().__init__(message)
        self.measured = measured


class DivergenceError(BetaPlaneError, ArithmeticError):
    exit_code = 3

    def __init__(self, message, last_time=None, history=None):
        super().__init__(message)
        self.last_time = last_time
        self.history = history


class InconclusiveError(BetaPlaneError):
    exit_code = 4
