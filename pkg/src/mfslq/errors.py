"""Exception hierarchy.

Every error carries a ``category`` used by the CLI to pick an exit code:
"input" (2), "solver" (3) or "verification" (4).
"""


class MFSLQError(Exception):
    category = "solver"

    def __init__(self, message, **context):
        super().__init__(message)
        self.context = context

    def to_dict(self):
        out = {"error": type(self).__name__, "message": str(self)}
        for key, val in self.context.items():
            try:
                out[key] = float(val) if hasattr(val, "__float__") and not isinstance(val, (int, bool)) else val
            except (TypeError, ValueError):
                out[key] = str(val)
        return out


class InputError(MFSLQError):
    category = "input"


class ProblemFileError(InputError):
    """Syntax or schema error in a problem file, with line/column."""

    def __init__(self, message, line=None, col=None, **context):
        loc = ""
        if line is not None:
            loc = f" (line {line}" + (f", column {col}" if col is not None else "") + ")"
        super().__init__(message + loc, line=line, col=col, **context)
        self.line = line
        self.col = col


class DimensionMismatch(InputError):
    pass


class NotPSD(InputError):
    pass


class RBelowDelta(InputError):
    pass


class IndexOutOfRange(InputError):
    pass


class ShapeMismatch(InputError):
    pass


class GridMismatch(InputError):
    pass


class ModeUnsupported(InputError):
    pass


class TreeTooLarge(InputError):
    pass


class DiscretizationMismatch(InputError):
    pass


class MissingMeanClosure(InputError):
    pass


class NonFiniteState(MFSLQError):
    pass


class PositivityLost(MFSLQError):
    pass


class NonFinite(MFSLQError):
    pass


class ThetaSingular(MFSLQError):
    pass


class RegressionIllConditioned(MFSLQError):
    pass


class CGNoConvergence(MFSLQError):
    pass


class ConstraintResidualTooLarge(MFSLQError):
    pass


class VerificationFailed(MFSLQError):
    category = "verification"
