"""Exception hierarchy shared by all modules.

Every error carries a short machine-readable ``code`` so that the command
line driver can map failures to stable identifiers and exit statuses.
"""


class SsrError(Exception):
    code = "E_GENERIC"
    exit_status = 2

    def __init__(self, message, code=None):
        super().__init__(message)
        if code is not None:
            self.code = code


class DomainError(SsrError, ValueError):
    code = "E_DOMAIN"


class ValidationError(DomainError):
    code = "E_VALIDATION"


class DegenerateProfileError(DomainError):
    code = "E_DEGENERATE_PROFILE"


class InfeasibleError(DomainError):
    code = "E_INFEASIBLE"


class InsufficientSamplesError(DomainError):
    code = "E_INSUFFICIENT_SAMPLES"


class UnsupportedDimensionError(DomainError):
    code = "E_DIMENSION"


class NumericError(SsrError, ArithmeticError):
    code = "E_NUMERIC"
    exit_status = 3


class CurvatureError(NumericError):
    code = "E_CURVATURE"


class ConvergenceError(NumericError):
    code = "E_CONVERGENCE"
