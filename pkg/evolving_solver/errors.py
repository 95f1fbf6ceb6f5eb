"""
Exception hierarchy for the solver.

Everything raised on purpose derives from SolverError so the CLI can map it to
exit code 1 and log it without a traceback for expected failures.
"""

from enum import StrEnum


class FaultKind(StrEnum):
    """Why a candidate program did not produce a stack top."""

    PARSE_ERROR = "parse_error"
    STACK_UNDERFLOW = "stack_underflow"
    EMPTY_STACK = "empty_stack"
    STEP_CAP = "step_cap"


class SolverError(Exception):
    """Base class for all solver errors"""


class ProgramParseError(SolverError, ValueError):
    """Program text is not a valid stack-DSL program"""

    kind = FaultKind.PARSE_ERROR


class ExecutionFault(SolverError):
    """Runtime fault raised by the interpreter"""

    def __init__(self, kind: FaultKind, message: str):
        super().__init__(f"{kind}: {message}")
        self.kind = kind


class TaskGenerationError(SolverError):
    """Task generator could not produce a non-degenerate task"""


class DegenerateTaskError(SolverError):
    """A sampled task was rejected (retried internally by the generator)"""


class ContextOverflowError(SolverError, ValueError):
    """Serialized task alone does not fit the context window"""


class VocabularyError(SolverError, ValueError):
    """Token id or token string outside the vocabulary"""


class NonFiniteError(SolverError, FloatingPointError):
    """A loss, gradient or activation became NaN/inf"""

    def __init__(self, location: str, message: str = "non-finite value"):
        super().__init__(f"{message} at {location}")
        self.location = location


class ShapeMismatchError(SolverError, ValueError):
    """Tensor shapes of an update do not match the parameters"""


class GroupBufferError(SolverError, ValueError):
    """Group buffer is missing data required by the loss"""


class BudgetExhausted(SolverError):
    """Search budget consumed or tree exhausted without a solution"""


class SnapshotError(SolverError):
    """Weight/adapter container is corrupt or does not match the expected checksum"""


class ReplayDivergence(SolverError):
    """A replayed solve did not reproduce the stored report"""

    def __init__(self, message: str, first_mismatch: dict | None = None):
        super().__init__(message)
        self.first_mismatch = first_mismatch or {}


class ReportFileError(SolverError):
    """Stored report files are missing, corrupt, or inconsistent"""


class SelectionError(SolverError):
    """No selectable child: every child is pruned or exhausted, or the node cannot be expanded"""
