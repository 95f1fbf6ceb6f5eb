"""
Models for everything a solve or an experiment writes out: the budget ledger,
per-solve reports with their event trace, internalization diagnostics and
suite summaries.

Wall-clock fields are kept apart from the deterministic content: replay and
the determinism checks compare `deterministic_json()`, which leaves them out.
"""

from enum import StrEnum
from typing import Any

from pydantic import Field, model_validator

from .base import CanonicalModel
from .config import Method


class PhaseRecord(CanonicalModel):
    """Cost accounting of one search phase (plus the internalization that followed it)"""

    phase: int
    nodes: int = 0
    tokens: int = 0
    forward_count: int = 0
    backward_count: int = 0
    forward_ms: float = Field(default=0.0, ge=0)
    backward_ms: float = Field(default=0.0, ge=0)

    @property
    def cost_ms(self) -> float:
        return self.forward_ms + self.backward_ms


class BudgetLedger(CanonicalModel):
    """
    Running totals of generations and gradient passes against the node budget.

    forward_count counts decoded thoughts (samples and greedy commits);
    backward_count counts adapter gradient passes.
    """

    forward_count: int = 0
    backward_count: int = 0
    nodes_generated: int = 0
    tokens_generated: int = 0
    forward_ms: float = Field(default=0.0, ge=0)
    backward_ms: float = Field(default=0.0, ge=0)
    phases: list[PhaseRecord] = Field(default_factory=list)

    def begin_phase(self) -> PhaseRecord:
        record = PhaseRecord(phase=len(self.phases) + 1)
        self.phases.append(record)
        return record

    @property
    def current(self) -> PhaseRecord | None:
        return self.phases[-1] if self.phases else None

    def record_forward(self, n_tokens: int, elapsed_ms: float, node: bool) -> None:
        """One decoded thought. `node` marks generations that become search nodes."""
        self.forward_count += 1
        self.tokens_generated += n_tokens
        self.forward_ms += elapsed_ms
        if node:
            self.nodes_generated += 1
        if phase := self.current:
            phase.forward_count += 1
            phase.tokens += n_tokens
            phase.forward_ms += elapsed_ms
            if node:
                phase.nodes += 1

    def record_backward(self, elapsed_ms: float) -> None:
        self.backward_count += 1
        self.backward_ms += elapsed_ms
        if phase := self.current:
            phase.backward_count += 1
            phase.backward_ms += elapsed_ms

    @classmethod
    def merge(cls, ledgers: list["BudgetLedger"]) -> "BudgetLedger":
        """Concatenate the phases of several ledgers (for suite-level estimates)."""
        merged = cls()
        for ledger in ledgers:
            merged.forward_count += ledger.forward_count
            merged.backward_count += ledger.backward_count
            merged.nodes_generated += ledger.nodes_generated
            merged.tokens_generated += ledger.tokens_generated
            merged.forward_ms += ledger.forward_ms
            merged.backward_ms += ledger.backward_ms
            for p in ledger.phases:
                merged.phases.append(p.model_copy(update={"phase": len(merged.phases) + 1}))
        return merged


# Wall-clock fields excluded from deterministic serialization
LEDGER_TIMING_EXCLUDE: dict[str, Any] = {
    "forward_ms": True,
    "backward_ms": True,
    "phases": {"__all__": {"forward_ms", "backward_ms"}},
}


class EventKind(StrEnum):
    COMMIT = "commit"
    SELECT = "select"
    GENERATE = "generate"
    EVALUATE = "evaluate"
    INTERNALIZE = "internalize"
    REF_SYNC = "ref_sync"
    SOLVED = "solved"
    EXHAUSTED = "exhausted"


class TraceEvent(CanonicalModel):
    """One step of a solve, in execution order. Contains no wall-clock data."""

    seq: int
    kind: EventKind
    phase: int
    node: int | None = None
    data: dict[str, Any] = Field(default_factory=dict)


class InternalizeRecord(CanonicalModel):
    """Diagnostics of one internalization (one group update of E epochs)"""

    step: int
    parent: int
    loss: float
    policy_term: float
    kl_ref: float
    kl_fixed: float
    mean_ratio: float
    max_ratio: float
    clip_fraction: float
    advantages: list[float]
    # Mean token KL(current || reference) after the last epoch, before any reference sync
    post_kl: float
    ref_synced: bool = False


class CommitRecord(CanonicalModel):
    """The greedy thought committed at one outer step, with its evaluation"""

    step: int
    text: str
    reward: float
    n_pass: int


class SolveReport(CanonicalModel):
    """
    Outcome of one solve.

    Together with the weight snapshot, (task, config, seed) fully determines
    every field except `wall_ms` and the ledger timings.
    """

    task_id: str
    task: dict[str, Any]
    task_fingerprint: str
    method: Method
    seed: int
    config_fingerprint: str
    config: dict[str, Any]
    snapshot_checksum: str
    solved: bool
    reward: float = Field(ge=0.0, le=1.0)
    final_program: str
    outer_steps: int = 0
    internalizations: int = 0
    ledger: BudgetLedger = Field(default_factory=BudgetLedger)
    committed: list[CommitRecord] = Field(default_factory=list)
    internalize_log: list[InternalizeRecord] = Field(default_factory=list)
    trace: list[TraceEvent] = Field(default_factory=list)
    error: str | None = None
    wall_ms: float = Field(default=0.0, ge=0)

    @model_validator(mode="after")
    def _solved_means_full_reward(self) -> "SolveReport":
        if self.solved and self.reward != 1.0:
            raise ValueError(f"solved report with reward {self.reward}")
        return self

    def deterministic_json(self) -> str:
        return self.canonical_json(exclude={"wall_ms": True, "ledger": LEDGER_TIMING_EXCLUDE})

    @property
    def mean_post_kl(self) -> float | None:
        if not self.internalize_log:
            return None
        return sum(r.post_kl for r in self.internalize_log) / len(self.internalize_log)


class BudgetEstimate(CanonicalModel):
    """Cost model: total ~ phases * (1 + rho) * Cost_fwd"""

    phases: int
    cost_fwd_ms: float
    cost_bwd_ms: float
    rho: float
    predicted_ms: float
    actual_ms: float
    relative_error: float
    # Projection to the full configured simulation budget
    full_budget_ms: float


class SeedSummary(CanonicalModel):
    seed: int
    n_tasks: int
    solve_rate: float = Field(ge=0.0, le=1.0)
    mean_reward: float
    mean_nodes: float
    mean_wall_ms: float


class SuiteSummary(CanonicalModel):
    """Aggregates of one method over a task suite; a pure function of the per-task reports"""

    method: Method
    fingerprint: str
    n_reports: int
    solve_rate: float = Field(ge=0.0, le=1.0)
    mean_reward: float
    mean_nodes: float
    mean_wall_ms: float
    mean_phase_cost_ms: float
    mean_post_kl: float | None = None
    # Relative error of the phases * (1 + rho) * Cost_fwd model; None without search phases
    budget_error: float | None = None
    per_seed: list[SeedSummary] = Field(default_factory=list)
    task_fingerprints: list[str] = Field(default_factory=list)

    def deterministic_json(self) -> str:
        return self.canonical_json(
            exclude={
                "mean_wall_ms": True,
                "mean_phase_cost_ms": True,
                "budget_error": True,
                "per_seed": {"__all__": {"mean_wall_ms"}},
            }
        )


class AblationCell(CanonicalModel):
    """One grid cell of an ablation: its parameter overrides and resulting summary"""

    label: str
    overrides: dict[str, Any]
    summary: SuiteSummary
