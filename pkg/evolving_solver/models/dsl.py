"""
Pydantic models for the stack-machine DSL: programs, tasks and reward reports.
"""

from enum import StrEnum

from pydantic import ConfigDict, Field, field_validator, model_validator

from ..errors import FaultKind
from .base import CanonicalModel

MAX_IMMEDIATE = 99
MAX_REPEAT = 8
MAX_NESTING = 2
MAX_INSTRUCTIONS = 64
MAX_TESTS = 8


class Opcode(StrEnum):
    PUSH = "PUSH"
    ADD = "ADD"
    SUB = "SUB"
    MUL = "MUL"
    DUP = "DUP"
    SWAP = "SWAP"
    DROP = "DROP"
    OVER = "OVER"
    REPEAT = "REPEAT"
    END = "END"


# Opcodes that carry an integer immediate
IMMEDIATE_OPCODES = frozenset({Opcode.PUSH, Opcode.REPEAT})


class Instruction(CanonicalModel):
    """One opcode with its optional integer immediate"""

    model_config = ConfigDict(extra="forbid", frozen=True)

    op: Opcode
    arg: int | None = None

    def render(self) -> str:
        return self.op.value if self.arg is None else f"{self.op.value} {self.arg}"


def structure_errors(instructions: tuple[Instruction, ...]) -> str | None:
    """Return the first structural problem of an instruction list, or None if valid."""
    if len(instructions) > MAX_INSTRUCTIONS:
        return f"program too long ({len(instructions)} > {MAX_INSTRUCTIONS} instructions)"
    depth = 0
    for pos, ins in enumerate(instructions):
        if ins.op in IMMEDIATE_OPCODES and ins.arg is None:
            return f"{ins.op} at {pos} needs an immediate"
        if ins.op not in IMMEDIATE_OPCODES and ins.arg is not None:
            return f"{ins.op} at {pos} takes no immediate"
        if ins.op is Opcode.PUSH and not -MAX_IMMEDIATE <= ins.arg <= MAX_IMMEDIATE:
            return f"immediate {ins.arg} at {pos} out of range [-{MAX_IMMEDIATE}, {MAX_IMMEDIATE}]"
        if ins.op is Opcode.REPEAT:
            if not 1 <= ins.arg <= MAX_REPEAT:
                return f"repeat count {ins.arg} at {pos} out of range [1, {MAX_REPEAT}]"
            depth += 1
            if depth > MAX_NESTING:
                return f"REPEAT nesting deeper than {MAX_NESTING} at {pos}"
        elif ins.op is Opcode.END:
            if depth == 0:
                return f"END without matching REPEAT at {pos}"
            depth -= 1
    if depth:
        return "unmatched REPEAT"
    return None


class Program(CanonicalModel):
    """
    A complete candidate program.

    Loop bounds are static, so every program halts; see dsl_env.execute.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    instructions: tuple[Instruction, ...] = ()

    @model_validator(mode="after")
    def _check_structure(self) -> "Program":
        problem = structure_errors(self.instructions)
        if problem:
            raise ValueError(problem)
        return self

    def __len__(self) -> int:
        return len(self.instructions)

    def render(self) -> str:
        return " ".join(ins.render() for ins in self.instructions)


class TestCase(CanonicalModel):
    """One unit test: input stack (bottom first) and the expected stack top"""

    __test__ = False  # not a pytest class

    input: list[int]
    expected: int


class TaskInstance(CanonicalModel):
    """
    A synthesis problem.

    hidden_solution is excluded from serialization: task files never carry it,
    it only goes into the generator manifest.
    """

    task_id: str
    difficulty: int = Field(ge=1, le=4)
    tests: list[TestCase] = Field(min_length=1, max_length=MAX_TESTS)
    hidden_solution: Program | None = Field(default=None, exclude=True)

    @field_validator("tests")
    @classmethod
    def _equal_arity(cls, tests: list[TestCase]) -> list[TestCase]:
        if len({len(t.input) for t in tests}) > 1:
            raise ValueError("all test input stacks must have equal length")
        return tests


class SolutionRecord(CanonicalModel):
    """One line of the generator manifest"""

    task_id: str
    solution: str


class TestOutcome(StrEnum):
    PASS = "pass"
    FAIL = "fail"
    ERROR = "error"


class RewardReport(CanonicalModel):
    """Outcome of running a candidate against all tests of a task"""

    n_pass: int = Field(ge=0)
    n_total: int = Field(ge=1)
    reward: float = Field(ge=0.0, le=1.0)
    per_test: list[TestOutcome]
    fault: FaultKind | None = None

    @property
    def solved(self) -> bool:
        return self.reward == 1.0
