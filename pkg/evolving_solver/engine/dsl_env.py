"""
Stack-machine DSL environment.

Parses and executes candidate programs, scores them against unit tests with
the piecewise pass-rate reward, and generates synthetic tasks with known
solutions. Everything here is a pure function of its arguments.

Opcodes: PUSH n, ADD, SUB, MUL, DUP, SWAP, DROP, OVER, REPEAT k ... END
Arithmetic wraps at 64 bits. The input stack is given bottom-first; the
program result is the top of the stack at halt.
"""

import logging
import random
import re
from collections.abc import Iterable
from pathlib import Path

from tenacity import retry, retry_if_exception_type, stop_after_attempt

from ..errors import (
    DegenerateTaskError,
    ExecutionFault,
    FaultKind,
    ProgramParseError,
    TaskGenerationError,
)
from ..models.dsl import (
    IMMEDIATE_OPCODES,
    Instruction,
    Opcode,
    Program,
    RewardReport,
    SolutionRecord,
    TaskInstance,
    TestCase,
    TestOutcome,
    structure_errors,
)

logger = logging.getLogger(__name__)

DEFAULT_STEP_CAP = 10_000
GENERATOR_ATTEMPTS = 100

# Generated tasks keep inputs and outputs small so the serialized tests stay short
INPUT_RANGE = (-9, 9)
OUTPUT_BOUND = 999
TESTS_PER_TASK = (4, 8)

_INT_RE = re.compile(r"^-?\d+$")
_MASK64 = (1 << 64) - 1
_HALF64 = 1 << 63


def _wrap(value: int) -> int:
    return ((value + _HALF64) & _MASK64) - _HALF64


def parse_program(text: str) -> Program:
    """
    Parse whitespace-separated program text.

    Raises:
        ProgramParseError: unknown opcode, missing/out-of-range immediate,
            unmatched REPEAT/END, nesting too deep, or program too long
    """
    tokens = text.split()
    instructions: list[Instruction] = []
    pos = 0
    while pos < len(tokens):
        word = tokens[pos]
        try:
            op = Opcode(word)
        except ValueError:
            raise ProgramParseError(f"unknown opcode '{word}' at token {pos}") from None
        arg = None
        if op in IMMEDIATE_OPCODES:
            if pos + 1 >= len(tokens) or not _INT_RE.match(tokens[pos + 1]):
                raise ProgramParseError(f"{op} at token {pos} needs an integer immediate")
            arg = int(tokens[pos + 1])
            pos += 1
        instructions.append(Instruction(op=op, arg=arg))
        pos += 1

    ins = tuple(instructions)
    problem = structure_errors(ins)
    if problem:
        raise ProgramParseError(problem)
    return Program(instructions=ins)


def render(program: Program) -> str:
    return program.render()


def _need(stack: list[int], n: int, op: Opcode) -> None:
    if len(stack) < n:
        raise ExecutionFault(
            FaultKind.STACK_UNDERFLOW, f"{op} needs {n} operand(s), stack has {len(stack)}"
        )


def execute(program: Program, input_stack: Iterable[int], step_cap: int = DEFAULT_STEP_CAP) -> int:
    """
    Run a program on an input stack and return the stack top at halt.

    Every dispatched instruction costs one step, REPEAT bodies once per
    iteration.

    Raises:
        ExecutionFault: stack underflow, empty stack at halt, step cap exceeded
    """
    if step_cap < 1:
        raise ValueError(f"step_cap must be >= 1, got {step_cap}")

    ins = program.instructions
    stack = [_wrap(int(v)) for v in input_stack]
    loops: list[list[int]] = []  # [body_start, remaining iterations]
    ip = 0
    steps = 0
    while ip < len(ins):
        steps += 1
        if steps > step_cap:
            raise ExecutionFault(FaultKind.STEP_CAP, f"exceeded {step_cap} steps")
        op = ins[ip].op
        if op is Opcode.PUSH:
            stack.append(ins[ip].arg)
        elif op is Opcode.ADD or op is Opcode.SUB or op is Opcode.MUL:
            _need(stack, 2, op)
            b = stack.pop()
            a = stack.pop()
            if op is Opcode.ADD:
                stack.append(_wrap(a + b))
            elif op is Opcode.SUB:
                stack.append(_wrap(a - b))
            else:
                stack.append(_wrap(a * b))
        elif op is Opcode.DUP:
            _need(stack, 1, op)
            stack.append(stack[-1])
        elif op is Opcode.SWAP:
            _need(stack, 2, op)
            stack[-1], stack[-2] = stack[-2], stack[-1]
        elif op is Opcode.DROP:
            _need(stack, 1, op)
            stack.pop()
        elif op is Opcode.OVER:
            _need(stack, 2, op)
            stack.append(stack[-2])
        elif op is Opcode.REPEAT:
            loops.append([ip + 1, ins[ip].arg])
        elif op is Opcode.END:
            frame = loops[-1]
            frame[1] -= 1
            if frame[1] > 0:
                ip = frame[0]
                continue
            loops.pop()
        ip += 1

    if not stack:
        raise ExecutionFault(FaultKind.EMPTY_STACK, "empty stack at halt")
    return stack[-1]


def reward_value(n_pass: int, n_total: int) -> float:
    """Piecewise reward: 1.0 if all pass, pass fraction if some pass, 0 otherwise."""
    if n_total < 1 or not 0 <= n_pass <= n_total:
        raise ValueError(f"invalid pass counts {n_pass}/{n_total}")
    if n_pass == n_total:
        return 1.0
    if n_pass > 0:
        return n_pass / n_total
    return 0.0


def evaluate(
    program: Program | str, task: TaskInstance, step_cap: int = DEFAULT_STEP_CAP
) -> RewardReport:
    """
    Score a candidate against every test of a task.

    Program text that does not parse earns 0 with every test marked as error.
    A runtime fault only fails the test it happened in; `fault` reports the
    first one seen.
    """
    n_total = len(task.tests)
    if isinstance(program, str):
        try:
            program = parse_program(program)
        except ProgramParseError:
            return RewardReport(
                n_pass=0,
                n_total=n_total,
                reward=0.0,
                per_test=[TestOutcome.ERROR] * n_total,
                fault=FaultKind.PARSE_ERROR,
            )

    outcomes: list[TestOutcome] = []
    fault: FaultKind | None = None
    for test in task.tests:
        try:
            top = execute(program, test.input, step_cap)
        except ExecutionFault as e:
            outcomes.append(TestOutcome.ERROR)
            fault = fault or e.kind
            continue
        outcomes.append(TestOutcome.PASS if top == test.expected else TestOutcome.FAIL)

    n_pass = sum(1 for o in outcomes if o is TestOutcome.PASS)
    return RewardReport(
        n_pass=n_pass,
        n_total=n_total,
        reward=reward_value(n_pass, n_total),
        per_test=outcomes,
        fault=fault,
    )


# ---------------------------------------------------------------------------
# Task generation
# ---------------------------------------------------------------------------

# Input arity choices per difficulty
_ARITY = {1: (1,), 2: (1, 2), 3: (1, 2), 4: (2,)}
_BINOPS = (Opcode.ADD, Opcode.SUB, Opcode.MUL)


def max_solution_length(difficulty: int) -> int:
    return 2 * difficulty + 2


def _sample_loop(rng: random.Random) -> list[Instruction]:
    """REPEAT block whose body consumes what it pushes (net stack effect zero)."""
    head = rng.choice(
        [Instruction(op=Opcode.PUSH, arg=rng.randint(1, 9)), Instruction(op=Opcode.DUP)]
    )
    return [
        Instruction(op=Opcode.REPEAT, arg=rng.randint(2, 4)),
        head,
        Instruction(op=rng.choice(_BINOPS)),
        Instruction(op=Opcode.END),
    ]


def _sample_program(rng: random.Random, arity: int, length: int, loops: bool) -> Program:
    """Random walk over opcodes that never underflows the stack."""
    out: list[Instruction] = []
    depth = arity
    while len(out) < length:
        remaining = length - len(out)
        if loops and depth >= 1 and remaining >= 4 and rng.random() < 0.35:
            out.extend(_sample_loop(rng))
            continue
        choices: list[Opcode] = [Opcode.PUSH]
        if depth >= 1:
            choices.append(Opcode.DUP)
        if depth >= 2:
            choices.extend([*_BINOPS, *_BINOPS, Opcode.SWAP, Opcode.OVER, Opcode.DROP])
        op = rng.choice(choices)
        if op is Opcode.PUSH:
            out.append(Instruction(op=op, arg=rng.randint(0, 9)))
            depth += 1
        else:
            out.append(Instruction(op=op))
            if op in _BINOPS or op is Opcode.DROP:
                depth -= 1
            elif op in (Opcode.DUP, Opcode.OVER):
                depth += 1
    return Program(instructions=tuple(out))


@retry(
    stop=stop_after_attempt(GENERATOR_ATTEMPTS),
    retry=retry_if_exception_type(DegenerateTaskError),
    reraise=True,
)
def _sample_task(rng: random.Random, difficulty: int) -> tuple[Program, list[TestCase]]:
    arity = rng.choice(_ARITY[difficulty])
    length = rng.randint(1, max_solution_length(difficulty))
    program = _sample_program(rng, arity, length, loops=difficulty >= 3)
    n_tests = rng.randint(*TESTS_PER_TASK)
    tests: list[TestCase] = []
    for _ in range(n_tests):
        stack = [rng.randint(*INPUT_RANGE) for _ in range(arity)]
        try:
            top = execute(program, stack)
        except ExecutionFault as e:
            raise DegenerateTaskError(f"solution faults: {e}") from e
        if abs(top) > OUTPUT_BOUND:
            raise DegenerateTaskError(f"output {top} exceeds {OUTPUT_BOUND}")
        tests.append(TestCase(input=stack, expected=top))
    if len({t.expected for t in tests}) == 1:
        raise DegenerateTaskError("constant output across all tests")
    return program, tests


def gen_task(rng_seed: int, difficulty: int) -> TaskInstance:
    """
    Generate a task with a known solution, deterministically per (seed, difficulty).

    Raises:
        ValueError: difficulty outside 1-4
        TaskGenerationError: no acceptable task within the attempt bound
    """
    if difficulty not in _ARITY:
        raise ValueError(f"difficulty must be in 1-4, got {difficulty}")
    rng = random.Random(f"task:{rng_seed}:{difficulty}")
    try:
        program, tests = _sample_task(rng, difficulty)
    except DegenerateTaskError as e:
        raise TaskGenerationError(
            f"no acceptable task for seed={rng_seed} difficulty={difficulty} "
            f"after {GENERATOR_ATTEMPTS} attempts: {e}"
        ) from e
    return TaskInstance(
        task_id=f"d{difficulty}-s{rng_seed}",
        difficulty=difficulty,
        tests=tests,
        hidden_solution=program,
    )


def dump_tasks(tasks: list[TaskInstance], task_path: Path, manifest_path: Path) -> None:
    """Write tasks (one JSON object per line) and the separate solutions manifest."""
    task_path.parent.mkdir(parents=True, exist_ok=True)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    with task_path.open("w", encoding="utf-8") as f:
        for task in tasks:
            f.write(task.canonical_json() + "\n")
    with manifest_path.open("w", encoding="utf-8") as f:
        for task in tasks:
            solution = task.hidden_solution.render() if task.hidden_solution else ""
            f.write(SolutionRecord(task_id=task.task_id, solution=solution).canonical_json() + "\n")
    logger.info(f"Wrote {len(tasks)} tasks to {task_path} (manifest: {manifest_path})")


def load_tasks(task_path: Path) -> list[TaskInstance]:
    """Read a task file. Raises pydantic.ValidationError on malformed lines."""
    tasks = []
    with task_path.open(encoding="utf-8") as f:
        for line in f:
            if line.strip():
                tasks.append(TaskInstance.model_validate_json(line))
    return tasks
