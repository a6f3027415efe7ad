"""Exception types shared across the solver stack."""


class FbsdeLabError(Exception):
    """Base class for all library errors."""


class DomainError(FbsdeLabError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class EvaluationError(FbsdeLabError, ArithmeticError):
    """A coefficient produced a non-finite value.

    Carries the coefficient name and the point at which it failed so the
    offending problem definition can be located.
    """

    def __init__(self, coefficient: str, point, detail: str = ""):
        self.coefficient = coefficient
        self.point = point
        msg = f"coefficient {coefficient!r} produced a non-finite value at {point}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class SimulationError(FbsdeLabError, RuntimeError):
    """Forward simulation produced a non-finite state (explosion)."""

    def __init__(self, path_index: int, step: int, message: str):
        self.path_index = path_index
        self.step = step
        super().__init__(message)


class SolverError(FbsdeLabError, RuntimeError):
    """A backward solver (regression, Newton, tridiagonal march) failed."""

    def __init__(self, message: str, step=None):
        self.step = step
        super().__init__(message)


class ConfigError(FbsdeLabError, ValueError):
    """Configuration text failed to parse or validate.

    ``errors`` holds every collected problem, not just the first.
    """

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(str(e) for e in self.errors))
