"""Exception types raised by the library."""


class NonrevError(Exception):
    """Base class for all library errors."""


class InvalidParameterError(NonrevError, ValueError):
    pass


class DivergentIntegralError(NonrevError, ArithmeticError):
    """An expectation whose integrand is not integrable (e.g. an untruncated heavy tail)."""


class NonDifferentiablePointError(NonrevError, ValueError):
    pass


class EmptyIntervalError(NonrevError, ValueError):
    pass


class TooLargeError(NonrevError, RuntimeError):
    """The exhaustive enumeration budget was exceeded."""


class NotAWinnerError(NonrevError, ValueError):
    pass


class OutOfSupportError(NonrevError, ValueError):
    pass


class InsufficientSamplesError(NonrevError, ValueError):
    pass


class DegenerateProfileError(NonrevError, ValueError):
    pass


class ConfigError(NonrevError, ValueError):
    pass
