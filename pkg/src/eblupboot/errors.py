"""Exception hierarchy shared by all modules."""


class EblupError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(EblupError, ValueError):
    """Invalid estimator, interval or simulation configuration."""


class DataError(EblupError, ValueError):
    """Malformed or inconsistent input data."""


class NumericalError(EblupError, ArithmeticError):
    """A numerical routine failed (factorization, solver, degenerate target)."""


class CholeskyError(NumericalError):
    def __init__(self, index, message=None):
        self.index = index
        super().__init__(
            message or f"matrix is not positive definite (leading minor {index} fails)"
        )


class CovarianceError(NumericalError):
    def __init__(self, component, message):
        self.component = component
        super().__init__(message)


class RankDeficientError(NumericalError):
    pass


class ConvergenceError(NumericalError):
    def __init__(self, message, bracket=None):
        self.bracket = bracket
        super().__init__(message)


class DegenerateTargetError(NumericalError):
    pass


class BootstrapError(NumericalError):
    pass
