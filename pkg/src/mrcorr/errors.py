"""Exception hierarchy.

Every error carries a stable ``code`` string, which the command-line tool
prints on standard error so that scripts can branch on it.
"""


class MRError(Exception):
    code = "MR_ERROR"


class InputError(MRError, ValueError):
    code = "INPUT_ERROR"


class EmptyIntersection(InputError):
    code = "EMPTY_INTERSECTION"


class NumericalError(MRError, ArithmeticError):
    code = "NUMERICAL_ERROR"


class SingularWeightMatrix(NumericalError):
    code = "SINGULAR"


class NotPositiveDefinite(NumericalError):
    code = "NOT_POSITIVE_DEFINITE"


class UndefinedEstimate(NumericalError):
    code = "UNDEFINED_ESTIMATE"


class SingularDesign(NumericalError):
    """Raised when the instrument cross-product matrix cannot be inverted."""

    code = "SINGULAR_DESIGN"

    def __init__(self, message, collinear_columns=()):
        super().__init__(message)
        self.collinear_columns = tuple(collinear_columns)
