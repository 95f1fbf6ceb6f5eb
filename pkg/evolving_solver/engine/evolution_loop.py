"""
Per-task solve loop and the baseline methods.

`solve` runs the full cycle on one task with a fresh transient adapter:

1. commit the greedy decode of the unadapted policy as the first conjecture
2. per outer step: one search phase; stop on a solving child; otherwise
   internalize the sibling group into the adapter (unless adaptation is
   off), commit the greedy decode of the evolved policy, evaluate it and
   append it to the root history
3. stop when solved, when the outer-step limit or node budget is reached, or
   when the tree is exhausted; discard the adapter

All randomness derives from the solve seed, so (task, config, seed, weights)
determines the report up to wall-clock fields.
"""

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import torch

from ..errors import BudgetExhausted, ReplayDivergence, SnapshotError
from ..models.config import EvolutionConfig, Method
from ..models.dsl import RewardReport, TaskInstance
from ..models.reports import (
    BudgetEstimate,
    BudgetLedger,
    CommitRecord,
    EventKind,
    InternalizeRecord,
    SolveReport,
)
from .adapter_engine import AdapterParams, OptimizerState, discard, init_adapter
from .dsl_env import evaluate
from .grpo import ReferencePolicies, internalize
from .policy_net import Feedback, HistoryEntry, PolicyNet, ReasoningState, Thought
from .search import PhaseContext, SearchTree, Solution, run_phase
from .snapshot import save_adapter, weights_checksum
from .trace import Trace, first_divergence

logger = logging.getLogger(__name__)

# Offset between the adapter-init seed and the sampling seed of a solve
SAMPLING_SEED_OFFSET = 1_000_003


@dataclass
class Policy:
    """Frozen base network with its weight checksum"""

    net: PolicyNet
    checksum: str = ""

    def __post_init__(self) -> None:
        self.net.freeze()
        if not self.checksum:
            self.checksum = weights_checksum(self.net)


@dataclass
class _Best:
    reward: float = -1.0
    text: str = ""

    def offer(self, text: str, report: RewardReport) -> None:
        if report.reward > self.reward:
            self.reward = report.reward
            self.text = text


@dataclass
class _Run:
    """Mutable bookkeeping of one solve"""

    ledger: BudgetLedger = field(default_factory=BudgetLedger)
    trace: Trace = field(default_factory=Trace)
    best: _Best = field(default_factory=_Best)
    committed: list[CommitRecord] = field(default_factory=list)
    internalize_log: list[InternalizeRecord] = field(default_factory=list)
    solved: bool = False
    outer_steps: int = 0


def _report(
    run: _Run,
    task: TaskInstance,
    policy: Policy,
    config: EvolutionConfig,
    seed: int,
    method: Method,
    started: float,
    best_of_n: int | None = None,
    fingerprint: str | None = None,
) -> SolveReport:
    config_dump: dict[str, Any] = {"evolution": config.model_dump(mode="json")}
    if best_of_n is not None:
        config_dump["best_of_n"] = best_of_n
    return SolveReport(
        task_id=task.task_id,
        task=task.model_dump(mode="json"),
        task_fingerprint=task.fingerprint(),
        method=method,
        seed=seed,
        config_fingerprint=fingerprint or config.fingerprint(),
        config=config_dump,
        snapshot_checksum=policy.checksum,
        solved=run.solved,
        reward=1.0 if run.solved else max(run.best.reward, 0.0),
        final_program=run.best.text,
        outer_steps=run.outer_steps,
        internalizations=len(run.internalize_log),
        ledger=run.ledger,
        committed=run.committed,
        internalize_log=run.internalize_log,
        trace=run.trace.events,
        wall_ms=(time.perf_counter() - started) * 1000,
    )


def _commit(
    run: _Run,
    policy: Policy,
    state: ReasoningState,
    adapter: AdapterParams | None,
    config: EvolutionConfig,
    step: int,
) -> tuple[HistoryEntry, RewardReport]:
    """Greedy decode from the current policy, evaluate, record."""
    started = time.perf_counter()
    thought = policy.net.greedy_decode(state, adapter, config.search.max_new_tokens)
    run.ledger.record_forward(len(thought.tokens), (time.perf_counter() - started) * 1000, node=False)
    report = evaluate(thought.text, state.task, config.dsl.step_cap)
    run.best.offer(thought.text, report)
    run.committed.append(CommitRecord(step=step, text=thought.text, reward=report.reward, n_pass=report.n_pass))
    run.trace.emit(EventKind.COMMIT, step, text=thought.text, reward=report.reward, n_pass=report.n_pass)
    return HistoryEntry(thought=thought, feedback=Feedback.from_report(policy.net.vocab, report)), report


def _dump(
    dump_dir: Path, task: TaskInstance, seed: int, method: Method, tree: SearchTree, adapter: AdapterParams | None
) -> None:
    stem = f"{task.task_id}.{method}.seed{seed}"
    dump_dir.mkdir(parents=True, exist_ok=True)
    (dump_dir / f"{stem}.tree.json").write_text(json.dumps(tree.dump(), sort_keys=True), encoding="utf-8")
    if adapter is not None:
        save_adapter(dump_dir / f"{stem}.adapter", adapter, {"task_id": task.task_id, "seed": seed})
    logger.debug(f"Dumped tree and adapter of {stem} to {dump_dir}")


def solve(
    task: TaskInstance,
    policy: Policy,
    config: EvolutionConfig,
    seed: int,
    method: Method | None = None,
    fingerprint: str | None = None,
    dump_dir: Path | None = None,
) -> SolveReport:
    """
    Search with test-time adapter evolution (or plain search when adaptation is off).

    With `dump_dir`, the search tree (JSON) and the final adapter are written
    there before the adapter is discarded.
    """
    method = method or (Method.POT if config.adaptation_enabled else Method.SEARCH_ONLY)
    started = time.perf_counter()
    run = _Run()
    net = policy.net
    logger.info(f"Solving {task.task_id} with {method} (seed {seed})")

    adapter: AdapterParams | None = None
    opt: OptimizerState | None = None
    refs: ReferencePolicies | None = None
    if config.adaptation_enabled:
        adapter = init_adapter(net, config.adapter, seed)
        opt = OptimizerState(adapter, config.adapter)
        refs = ReferencePolicies.start(adapter)
    generator = torch.Generator().manual_seed(seed + SAMPLING_SEED_OFFSET)
    tree = SearchTree()

    try:
        history: list[HistoryEntry] = []
        entry, report = _commit(run, policy, ReasoningState(task=task), adapter, config, step=0)
        history.append(entry)
        if report.solved:
            run.solved = True
            run.trace.emit(EventKind.SOLVED, 0, source="commit")
            return _report(run, task, policy, config, seed, method, started, fingerprint=fingerprint)

        for phase in range(1, config.outer_step_limit + 1):
            run.ledger.begin_phase()
            ctx = PhaseContext(
                net=net,
                task=task,
                adapter=adapter,
                config=config.search,
                generator=generator,
                ledger=run.ledger,
                trace=run.trace,
                root_history=tuple(history),
                dsl=config.dsl,
                phase=phase,
            )
            try:
                result = run_phase(tree, ctx)
            except BudgetExhausted as e:
                # nothing was generated in this phase
                run.ledger.phases.pop()
                logger.info(f"{task.task_id}: {e}")
                run.trace.emit(EventKind.EXHAUSTED, phase, reason=str(e))
                break
            for node in tree.nodes[1:]:
                if node.report is not None:
                    run.best.offer(node.thought.text, node.report)

            if isinstance(result, Solution):
                run.solved = True
                run.best.offer(result.thought.text, result.report)
                run.trace.emit(EventKind.SOLVED, phase, result.node_id, source="search")
                break

            if adapter is not None:
                record = internalize(net, result, adapter, opt, refs, config.grpo, run.ledger)
                run.internalize_log.append(record)
                run.trace.emit(
                    EventKind.INTERNALIZE,
                    phase,
                    result.parent,
                    loss=record.loss,
                    post_kl=record.post_kl,
                    advantages=record.advantages,
                )
                if record.ref_synced:
                    run.trace.emit(EventKind.REF_SYNC, phase, step=record.step)

            entry, report = _commit(
                run, policy, ReasoningState(task=task, history=tuple(history)), adapter, config, step=phase
            )
            history.append(entry)
            run.outer_steps += 1
            if report.solved:
                run.solved = True
                run.trace.emit(EventKind.SOLVED, phase, source="commit")
                break
        logger.info(
            f"{task.task_id}: solved={run.solved} best={run.best.reward:.3f} "
            f"nodes={run.ledger.nodes_generated} internalizations={len(run.internalize_log)}"
        )
        return _report(run, task, policy, config, seed, method, started, fingerprint=fingerprint)
    finally:
        if dump_dir is not None:
            _dump(dump_dir, task, seed, method, tree, adapter)
        if adapter is not None:
            refs.release()
            discard(adapter, opt)


def solve_greedy(
    task: TaskInstance, policy: Policy, config: EvolutionConfig, seed: int, fingerprint: str | None = None
) -> SolveReport:
    """Single greedy decode of the base policy, evaluated once."""
    started = time.perf_counter()
    run = _Run()
    run.ledger.begin_phase()
    t0 = time.perf_counter()
    thought = policy.net.greedy_decode(ReasoningState(task=task), None, config.search.max_new_tokens)
    run.ledger.record_forward(len(thought.tokens), (time.perf_counter() - t0) * 1000, node=True)
    report = _evaluate_candidate(run, thought, task, config, index=0)
    run.solved = report.solved
    return _report(run, task, policy, config, seed, Method.GREEDY, started, fingerprint=fingerprint)


def solve_best_of_n(
    task: TaskInstance,
    policy: Policy,
    config: EvolutionConfig,
    seed: int,
    n: int,
    fingerprint: str | None = None,
) -> SolveReport:
    """Up to n temperature samples of the base policy; stops at the first that passes every test."""
    started = time.perf_counter()
    run = _Run()
    run.ledger.begin_phase()
    generator = torch.Generator().manual_seed(seed + SAMPLING_SEED_OFFSET)
    state = ReasoningState(task=task)
    for i in range(n):
        t0 = time.perf_counter()
        thought = policy.net.sample_thought(
            state, None, config.search.temperature, config.search.max_new_tokens, generator
        )
        run.ledger.record_forward(len(thought.tokens), (time.perf_counter() - t0) * 1000, node=True)
        if _evaluate_candidate(run, thought, task, config, index=i).solved:
            run.solved = True
            break
    return _report(run, task, policy, config, seed, Method.BEST_OF_N, started, best_of_n=n, fingerprint=fingerprint)


def _evaluate_candidate(
    run: _Run, thought: Thought, task: TaskInstance, config: EvolutionConfig, index: int
) -> RewardReport:
    report = evaluate(thought.text, task, config.dsl.step_cap)
    run.best.offer(thought.text, report)
    run.trace.emit(
        EventKind.GENERATE, 1, index, text=thought.text, n_tokens=len(thought.tokens), mean_logprob=thought.mean_logprob
    )
    run.trace.emit(EventKind.EVALUATE, 1, index, reward=report.reward, n_pass=report.n_pass)
    return report


def run_method(
    method: Method,
    task: TaskInstance,
    policy: Policy,
    config: EvolutionConfig,
    seed: int,
    best_of_n: int = 20,
    fingerprint: str | None = None,
    dump_dir: Path | None = None,
) -> SolveReport:
    if method is Method.GREEDY:
        return solve_greedy(task, policy, config, seed, fingerprint)
    if method is Method.BEST_OF_N:
        return solve_best_of_n(task, policy, config, seed, best_of_n, fingerprint)
    enabled = method is Method.POT
    if config.adaptation_enabled != enabled:
        config = config.model_copy(update={"adaptation_enabled": enabled})
    return solve(task, policy, config, seed, method, fingerprint, dump_dir)


def estimate_budget(config: EvolutionConfig, ledger: BudgetLedger) -> BudgetEstimate:
    """
    Total ~ phases * (1 + rho) * Cost_fwd.

    Cost_fwd is the mean forward cost per phase and rho the mean backward cost
    of the phases that internalized over Cost_fwd (0 without adaptation).

    Raises:
        ValueError: ledger has no phases
    """
    if not ledger.phases:
        raise ValueError("cannot estimate a budget from an empty ledger")
    phases = len(ledger.phases)
    cost_fwd = sum(p.forward_ms for p in ledger.phases) / phases
    bwd = [p.backward_ms for p in ledger.phases if p.backward_count > 0]
    cost_bwd = sum(bwd) / len(bwd) if bwd else 0.0
    rho = cost_bwd / cost_fwd if cost_fwd > 0 else 0.0
    predicted = phases * (1 + rho) * cost_fwd
    actual = sum(p.cost_ms for p in ledger.phases)
    return BudgetEstimate(
        phases=phases,
        cost_fwd_ms=cost_fwd,
        cost_bwd_ms=cost_bwd,
        rho=rho,
        predicted_ms=predicted,
        actual_ms=actual,
        relative_error=abs(predicted - actual) / actual if actual > 0 else 0.0,
        full_budget_ms=config.search.max_simulations * (1 + rho) * cost_fwd,
    )


def efficiency_ratio(
    static_phases: int, static_cost_fwd: float, adaptive_phases: int, adaptive_cost_total: float
) -> float:
    """Cost of a static search over the cost of an adaptive one: (M_s * Cost_fwd) / (M_a * Cost_total)"""
    if adaptive_phases <= 0 or adaptive_cost_total <= 0:
        raise ValueError("adaptive arm needs at least one phase with positive cost")
    return (static_phases * static_cost_fwd) / (adaptive_phases * adaptive_cost_total)


def replay(report: SolveReport, policy: Policy) -> SolveReport:
    """
    Re-run a stored solve and require a byte-identical deterministic report.

    Raises:
        SnapshotError: the policy weights differ from the ones the report was made with
        ReplayDivergence: the rerun differs; carries the first mismatching event
    """
    if policy.checksum != report.snapshot_checksum:
        raise SnapshotError(
            f"report made with weights {report.snapshot_checksum[:16]}, "
            f"loaded weights are {policy.checksum[:16]}"
        )
    task = TaskInstance.model_validate(report.task)
    config = EvolutionConfig.model_validate(report.config["evolution"])
    rerun = run_method(
        report.method,
        task,
        policy,
        config,
        report.seed,
        report.config.get("best_of_n", 20),
        report.config_fingerprint,
    )
    if rerun.deterministic_json() == report.deterministic_json():
        return rerun

    mismatch = first_divergence(report.trace, rerun.trace)
    if mismatch is None:
        stored = report.model_dump(mode="json")
        fresh = rerun.model_dump(mode="json")
        for key in sorted(stored):
            if key not in ("wall_ms", "ledger") and stored[key] != fresh.get(key):
                mismatch = {"field": key, "stored": stored[key], "replayed": fresh.get(key)}
                break
    raise ReplayDivergence(f"replay of {report.task_id} (seed {report.seed}) diverged", mismatch)
