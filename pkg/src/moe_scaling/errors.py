"""Exception hierarchy.

Every error raised on bad inputs or impossible problems derives from
:class:`ScalingError`; the CLI maps these to exit status 1.
"""


class ScalingError(Exception):
    """Base class for domain errors."""


class InvalidCoefficients(ScalingError, ValueError):
    pass


class NoRoot(ScalingError, ValueError):
    """A parameter or memory count is outside the invertible range."""


class DegenerateExponents(ScalingError, ValueError):
    """Reduced exponents are non-negative, so no compute optimum exists."""


class Infeasible(ScalingError):
    pass


class NoCrossing(ScalingError):
    pass


class Underdetermined(ScalingError):
    pass


class TooFewRecords(Underdetermined):
    pass


class EmptyDataset(Underdetermined):
    pass


class NonFinite(ScalingError, ArithmeticError):
    pass


class ParseError(ScalingError, ValueError):
    def __init__(self, message: str, line: int | None = None, column: str | None = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if column is not None:
            where.append(f"column {column!r}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.line = line
        self.column = column


class ValidationError(ScalingError, ValueError):
    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field
