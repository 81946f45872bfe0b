"""Exception hierarchy shared by all symcon modules."""


class SymconError(Exception):
    """Base class for all errors raised by this package."""


class ExprSyntaxError(SymconError):
    """Malformed expression text.  Carries the 1-based line/column of the
    offending token."""

    def __init__(self, message, line=1, column=1):
        super().__init__(f"{message} (line {line}, column {column})")
        self.line = line
        self.column = column


class UnknownFunctionError(ExprSyntaxError):
    pass


class EvalError(SymconError):
    """Evaluation failure: unbound name, division by zero, domain error.
    ``subexpr`` is the rendered offending subexpression when available."""

    def __init__(self, message, subexpr=None):
        if subexpr is not None:
            message = f"{message} in '{subexpr}'"
        super().__init__(message)
        self.subexpr = subexpr


class NonSmoothError(SymconError):
    """A nonsmooth builtin (abs/min/max/step) was differentiated through a
    point where its argument depends on the differentiation variable."""


class ModelError(SymconError):
    """Model file cannot be loaded or violates a structural invariant."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"{message} (line {line})"
        super().__init__(message)
        self.line = line


class CertifyError(SymconError):
    """Certification could not be carried out (not a pass/fail verdict)."""


class SimulationError(SymconError):
    """Integration failure: step-size underflow, NaN/Inf state, bad config."""
