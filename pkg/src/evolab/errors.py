"""Exception types shared across the package."""


class EvoError(Exception):
    """Base class for all package errors."""


class InvalidInputError(EvoError, ValueError):
    pass


class DomainError(EvoError, ValueError):
    """Argument lies outside the mathematical domain of a function."""


class InsufficientDataError(EvoError, ValueError):
    pass


class DegenerateDataError(EvoError, ValueError):
    pass


class ExploitationRangeError(DomainError):
    """nu * n / N_mu >= 1, so the tail quantile is undefined."""


class RecoveryNeeded(EvoError):
    """The linearized constrained problem has no feasible point."""


class CannotRecoverError(EvoError):
    """Constraint is violated but its gradient vanishes."""


class NumericalError(EvoError, ArithmeticError):
    pass


class UsageError(EvoError, RuntimeError):
    pass
