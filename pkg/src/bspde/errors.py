"""Exception taxonomy shared across the package.

The CLI maps these onto process exit codes, so solver internals should raise
the most specific class that applies rather than bare ValueError wherever the
failure is one of the contract categories (structure, budget, numerics,
parsing).
"""


class BspdeError(Exception):
    """Base class for all package-specific failures."""


class StructuralError(BspdeError):
    """Shape or wiring problem in inputs (wrong matrix shape, mismatched grid)."""


class DegenerateKernelError(StructuralError):
    """Mollifier radius falls below what the collocation grid can resolve."""


class BudgetError(BspdeError):
    """A sizing limit (tree nodes, dense unknowns, solve storage) was exceeded."""

    def __init__(self, message: str, count: int | None = None, budget: int | None = None):
        super().__init__(message)
        self.count = count
        self.budget = budget


class NumericError(BspdeError):
    """Numerical failure: singular implicit step, rank-deficient regression, ..."""


class ConvergenceError(NumericError):
    """An iteration (fixed point, freezing, continuation) failed to converge."""


class ScenarioValidationError(BspdeError):
    """Strict loading rejected a scenario whose standing-assumption checks failed."""

    def __init__(self, message: str, report=None):
        super().__init__(message)
        self.report = report


class ParseError(BspdeError):
    """Expression or scenario-file syntax error, with source position."""

    def __init__(self, message: str, line: int = 1, column: int = 0):
        super().__init__(f"{message} (line {line}, column {column})")
        self.bare_message = message
        self.line = line
        self.column = column


class EvalError(BspdeError):
    """Runtime evaluation failure of a parsed expression (division by zero, ...)."""

    def __init__(self, message: str, span: tuple[int, int] | None = None):
        if span is not None:
            message = f"{message} (at columns {span[0]}..{span[1]})"
        super().__init__(message)
        self.span = span
