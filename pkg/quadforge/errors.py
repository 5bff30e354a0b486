from typing import Any, Optional


class NoAdmissibleSupportError(ValueError):
    """The radial sign function has no root on (r1, R']."""


class EmptyDomainError(ValueError):
    pass


class NearSingularError(ValueError):
    """An evaluation point lies too close to the support of a potential."""


class GridMismatchError(ValueError):
    pass


class NoConvergenceError(RuntimeError):
    def __init__(self, message: str, last_iterate: Optional[Any] = None):
        super().__init__(message)
        self.last_iterate = last_iterate


class EigenNoConvergeError(RuntimeError):
    pass


class PositivityLostError(RuntimeError):
    pass
