"""
Thought-tree search with PUCT selection.

Every node but the root holds one complete candidate program. Expanding a
leaf samples k sibling thoughts, evaluates each against the task right away
and backpropagates its reward through the root path. A node's state is the
root history (committed thoughts) followed by the thoughts and feedback on
its path, so children condition on what their ancestors tried.

Visit counts: a non-root node counts its own evaluation plus everything
backpropagated from its subtree, so N = 1 + sum of children's N; the root
counts only its subtree.
"""

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Any

import torch

from ..errors import BudgetExhausted, SelectionError
from ..models.config import DslLimits, SearchConfig
from ..models.dsl import RewardReport, TaskInstance
from ..models.reports import BudgetLedger, EventKind
from .adapter_engine import AdapterParams
from .dsl_env import evaluate
from .grpo import GroupBuffer, Trajectory
from .policy_net import Feedback, HistoryEntry, PolicyNet, ReasoningState, Thought
from .trace import Trace

logger = logging.getLogger(__name__)

ROOT = 0


@dataclass
class SearchNode:
    id: int
    parent: int | None
    depth: int
    thought: Thought | None = None
    feedback: Feedback | None = None
    reward: float = 0.0
    N: int = 0
    W: float = 0.0
    P: float = 1.0
    children: list[int] = field(default_factory=list)
    pruned: bool = False
    # No further expansion possible below this node
    exhausted: bool = False

    @property
    def Q(self) -> float:
        return self.W / self.N if self.N else 0.0

    @property
    def report(self) -> RewardReport | None:
        return self.feedback.report if self.feedback else None


class SearchTree:
    def __init__(self) -> None:
        self.nodes: list[SearchNode] = [SearchNode(id=ROOT, parent=None, depth=0)]
        # (leaf id, reward) in backpropagation order
        self.backprop_log: list[tuple[int, float]] = []

    @property
    def root(self) -> SearchNode:
        return self.nodes[ROOT]

    def __getitem__(self, node_id: int) -> SearchNode:
        return self.nodes[node_id]

    def add_child(self, parent: SearchNode, thought: Thought, feedback: Feedback) -> SearchNode:
        node = SearchNode(
            id=len(self.nodes),
            parent=parent.id,
            depth=parent.depth + 1,
            thought=thought,
            feedback=feedback,
            reward=feedback.report.reward,
        )
        self.nodes.append(node)
        parent.children.append(node.id)
        return node

    def path(self, node_id: int) -> list[SearchNode]:
        """Nodes from the root (excluded) down to node_id"""
        out = []
        node = self.nodes[node_id]
        while node.parent is not None:
            out.append(node)
            node = self.nodes[node.parent]
        return out[::-1]

    def history(self, node_id: int) -> tuple[HistoryEntry, ...]:
        return tuple(HistoryEntry(thought=n.thought, feedback=n.feedback) for n in self.path(node_id))

    def generated(self) -> int:
        return len(self.nodes) - 1

    def dump(self) -> list[dict[str, Any]]:
        return [
            {
                "id": n.id,
                "parent": n.parent,
                "depth": n.depth,
                "reward": n.reward,
                "N": n.N,
                "Q": n.Q,
                "P": n.P,
                "pruned": n.pruned,
                "thought_text": n.thought.text if n.thought else None,
            }
            for n in self.nodes
        ]


def puct_score(child: SearchNode, total_visits: int, c_puct: float) -> float:
    return child.Q + c_puct * child.P * math.sqrt(total_visits) / (1 + child.N)


def select_child(tree: SearchTree, node_id: int, c_puct: float) -> int:
    """
    Argmax of Q + c_puct * P * sqrt(sum_b N_b) / (1 + N) over selectable children.

    Ties go to the lowest child index.

    Raises:
        SelectionError: every child is pruned or exhausted
    """
    node = tree[node_id]
    total = sum(tree[c].N for c in node.children)
    best: int | None = None
    best_score = -math.inf
    for c in node.children:
        child = tree[c]
        if child.pruned or child.exhausted:
            continue
        score = puct_score(child, total, c_puct)
        if score > best_score:
            best, best_score = c, score
    if best is None:
        raise SelectionError(f"node {node_id} has no selectable child")
    return best


def backpropagate(tree: SearchTree, leaf_id: int, reward: float) -> None:
    """N += 1, W += reward on the leaf and every ancestor up to the root."""
    node: SearchNode | None = tree[leaf_id]
    while node is not None:
        node.N += 1
        node.W += reward
        node = tree[node.parent] if node.parent is not None else None
    tree.backprop_log.append((leaf_id, reward))


def sibling_priors(thoughts: list[Thought]) -> list[float]:
    """Softmax over the siblings' mean token log-probs"""
    scores = torch.tensor([t.mean_logprob for t in thoughts], dtype=torch.float64)
    return torch.softmax(scores, dim=0).tolist()


def should_prune(report: RewardReport) -> bool:
    return report.reward == 0.0 and report.fault is not None


@dataclass
class PhaseContext:
    """Everything a search phase reads besides the tree"""

    net: PolicyNet
    task: TaskInstance
    adapter: AdapterParams | None
    config: SearchConfig
    generator: torch.Generator
    ledger: BudgetLedger
    trace: Trace
    root_history: tuple[HistoryEntry, ...] = ()
    dsl: DslLimits = field(default_factory=DslLimits)
    phase: int = 0

    def state(self, tree: SearchTree, node_id: int) -> ReasoningState:
        return ReasoningState(task=self.task, history=(*self.root_history, *tree.history(node_id)))


@dataclass(frozen=True, slots=True)
class Solution:
    node_id: int
    thought: Thought
    report: RewardReport


def _mark_exhausted(tree: SearchTree, node_id: int) -> None:
    """Propagate exhaustion upward while every child of a node is pruned or exhausted."""
    node: SearchNode | None = tree[node_id]
    node.exhausted = True
    node = tree[node.parent] if node.parent is not None else None
    while node is not None and node.children and all(
        tree[c].pruned or tree[c].exhausted for c in node.children
    ):
        node.exhausted = True
        node = tree[node.parent] if node.parent is not None else None


def select_leaf(tree: SearchTree, config: SearchConfig) -> int:
    """
    Descend by PUCT to an expandable leaf. Leaves at max depth are marked
    exhausted and the descent restarts.

    Raises:
        BudgetExhausted: nothing left to expand
    """
    while True:
        if tree.root.exhausted:
            raise BudgetExhausted("search tree exhausted")
        node = tree.root
        while node.children:
            try:
                node = tree[select_child(tree, node.id, config.c_puct)]
            except SelectionError:
                _mark_exhausted(tree, node.id)
                break
        else:
            if node.depth < config.max_depth:
                return node.id
            _mark_exhausted(tree, node.id)


def expand(tree: SearchTree, node_id: int, ctx: PhaseContext) -> tuple[list[int], Solution | None]:
    """
    Sample up to k children of a leaf, evaluating and backpropagating each.

    Stops early when a child passes every test.

    Raises:
        SelectionError: node is at max depth or pruned
    """
    parent = tree[node_id]
    if parent.depth >= ctx.config.max_depth:
        raise SelectionError(f"node {node_id} is at max depth {ctx.config.max_depth}")
    if parent.pruned:
        raise SelectionError(f"node {node_id} is pruned")

    state = ctx.state(tree, node_id)
    children: list[SearchNode] = []
    solution: Solution | None = None
    for _ in range(ctx.config.k):
        started = time.perf_counter()
        thought = ctx.net.sample_thought(
            state, ctx.adapter, ctx.config.temperature, ctx.config.max_new_tokens, ctx.generator
        )
        ctx.ledger.record_forward(len(thought.tokens), (time.perf_counter() - started) * 1000, node=True)
        report = evaluate(thought.text, ctx.task, ctx.dsl.step_cap)
        child = tree.add_child(parent, thought, Feedback.from_report(ctx.net.vocab, report))
        child.pruned = should_prune(report)
        children.append(child)
        ctx.trace.emit(
            EventKind.GENERATE,
            ctx.phase,
            child.id,
            parent=node_id,
            text=thought.text,
            n_tokens=len(thought.tokens),
            mean_logprob=thought.mean_logprob,
        )
        ctx.trace.emit(
            EventKind.EVALUATE,
            ctx.phase,
            child.id,
            reward=report.reward,
            n_pass=report.n_pass,
            fault=report.fault.value if report.fault else None,
        )
        backpropagate(tree, child.id, report.reward)
        if report.solved:
            solution = Solution(node_id=child.id, thought=thought, report=report)
            break

    for child, prior in zip(children, sibling_priors([c.thought for c in children]), strict=True):
        child.P = prior
    if all(c.pruned for c in children):
        _mark_exhausted(tree, node_id)
    return [c.id for c in children], solution


def run_phase(tree: SearchTree, ctx: PhaseContext) -> GroupBuffer | Solution:
    """
    One simulation: select a leaf, expand k children, evaluate, backpropagate.

    Returns the Solution as soon as a child solves the task, otherwise the
    sibling group for internalization.

    Raises:
        BudgetExhausted: node budget spent or tree exhausted
    """
    if tree.generated() + ctx.config.k > ctx.config.node_budget:
        raise BudgetExhausted(f"node budget {ctx.config.node_budget} reached")
    leaf = select_leaf(tree, ctx.config)
    ctx.trace.emit(EventKind.SELECT, ctx.phase, leaf, depth=tree[leaf].depth)
    child_ids, solution = expand(tree, leaf, ctx)
    if solution is not None:
        return solution
    return GroupBuffer(
        parent=leaf,
        trajectories=[
            Trajectory(node_id=c, thought=tree[c].thought, reward=tree[c].reward) for c in child_ids
        ],
    )
