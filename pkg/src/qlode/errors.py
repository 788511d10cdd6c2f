"""Exception hierarchy shared by every qlode module."""


class QlodeError(Exception):
    """Base class for all qlode errors."""


class ConfigurationError(QlodeError, ValueError):
    """Invalid sizes, orders, tolerances or mismatched dimensions."""


class DomainError(QlodeError, ValueError):
    """A time point lies outside the model domain, or a solution has a pole."""


class NumericalError(QlodeError, ArithmeticError):
    """Non-finite values or a singular linear system."""


class SingularParameterError(NumericalError):
    """A parameter value makes the right-hand side undefined (e.g. division by zero)."""


class DegenerateFitError(NumericalError):
    """The effective dimension reached the number of observations."""


class DataError(QlodeError, ValueError):
    """Malformed dataset files or observations inconsistent with the model."""
