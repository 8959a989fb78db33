"""Exception hierarchy.

``ValidationError`` covers bad inputs (CLI exit code 2); ``SolverError``
covers numerical failures at run time (CLI exit code 3).
"""


class DmpcError(Exception):
    pass


class ValidationError(DmpcError, ValueError):
    pass


class SolverError(DmpcError, RuntimeError):
    pass


class DimensionMismatch(ValidationError):
    pass


class EpsOutOfRange(ValidationError):
    pass
