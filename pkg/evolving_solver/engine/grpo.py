"""
Group-relative policy optimization over sibling thoughts.

A group is the set of children expanded from one parent node. Their rewards
are normalized within the group into advantages, and the adapter is trained
on a token-level clipped surrogate with two exact KL penalties: beta against
the periodically synced reference adapter and fixed_kl against the adapter as
it was initialized.
"""

import logging
import time
from collections.abc import Sequence
from dataclasses import dataclass, field

import torch
from torch import Tensor

from ..errors import GroupBufferError
from ..models.config import GrpoConfig
from ..models.reports import BudgetLedger, InternalizeRecord
from .adapter_engine import AdapterParams, OptimizerState, apply_update, backward_adapter
from .policy_net import PolicyNet, Thought

logger = logging.getLogger(__name__)


@dataclass(frozen=True, slots=True)
class Trajectory:
    node_id: int
    thought: Thought
    reward: float


@dataclass
class GroupBuffer:
    """
    Sibling trajectories sharing one parent (and therefore one prompt).

    `advantages` is filled by compute_advantages.
    """

    parent: int
    trajectories: list[Trajectory]
    advantages: list[float] | None = None

    @property
    def prompt(self) -> tuple[int, ...]:
        return self.trajectories[0].thought.prompt

    @property
    def rewards(self) -> list[float]:
        return [t.reward for t in self.trajectories]

    def validate(self) -> None:
        if not self.trajectories:
            raise GroupBufferError("empty group")
        prompt = self.prompt
        for t in self.trajectories:
            if t.thought.prompt != prompt:
                raise GroupBufferError(f"node {t.node_id} does not share the group prompt")
            if len(t.thought.gen_logprobs) != len(t.thought.tokens):
                raise GroupBufferError(
                    f"node {t.node_id}: {len(t.thought.gen_logprobs)} old log-probs for "
                    f"{len(t.thought.tokens)} tokens"
                )
        if self.advantages is None:
            raise GroupBufferError("advantages not computed")
        if len(self.advantages) != len(self.trajectories):
            raise GroupBufferError("advantage count does not match group size")


def compute_advantages(rewards: Sequence[float], config: GrpoConfig) -> list[float]:
    """clip((r - mean) / max(std, eta), -C_A, C_A) with the population std"""
    if not rewards:
        raise ValueError("empty reward group")
    if all(r == rewards[0] for r in rewards):
        return [0.0] * len(rewards)
    r = torch.tensor(list(rewards), dtype=torch.float64)
    std = r.std(correction=0)
    adv = (r - r.mean()) / torch.clamp(std, min=config.eta)
    return adv.clamp(-config.adv_clip, config.adv_clip).tolist()


def kl_exact(p_logits: Tensor, q_logits: Tensor) -> Tensor:
    """KL(p || q) over the last dimension, computed in log space"""
    log_p = torch.log_softmax(p_logits, dim=-1)
    log_q = torch.log_softmax(q_logits, dim=-1)
    return (log_p.exp() * (log_p - log_q)).sum(-1)


def _kl_rows(log_p: Tensor, log_q: Tensor) -> Tensor:
    return (log_p.exp() * (log_p - log_q)).sum(-1)


@dataclass
class RefSnapshot:
    adapter: AdapterParams
    step: int


@dataclass
class ReferencePolicies:
    """
    The two frozen comparison policies of the loss.

    `anchor` is the adapter as initialized; `ref` starts equal to it and is
    replaced by the current adapter every `ref_sync_every` internalizations.
    """

    anchor: AdapterParams
    ref: RefSnapshot
    updates: int = 0

    @classmethod
    def start(cls, adapter: AdapterParams) -> "ReferencePolicies":
        anchor = adapter.snapshot()
        return cls(anchor=anchor, ref=RefSnapshot(adapter=anchor, step=0))

    def after_update(self, adapter: AdapterParams, config: GrpoConfig) -> bool:
        """Count one internalization; sync the reference on the boundary. Returns True on sync."""
        self.updates += 1
        if self.updates % config.ref_sync_every:
            return False
        if self.ref.adapter is not self.anchor:
            self.ref.adapter.release()
        self.ref = RefSnapshot(adapter=adapter.snapshot(), step=self.updates)
        logger.debug(f"Reference adapter synced after {self.updates} updates")
        return True

    def release(self) -> None:
        if self.ref.adapter is not self.anchor:
            self.ref.adapter.release()
        self.anchor.release()


@dataclass
class GrpoLossSpec:
    """
    The clipped GRPO loss of one group, as a function of the adapter.

    Reference and anchor log-prob rows do not depend on the trained adapter and
    are computed once.
    """

    net: PolicyNet
    buffer: GroupBuffer
    config: GrpoConfig
    ref: AdapterParams | None
    anchor: AdapterParams | None
    _fixed_rows: dict[str, list[Tensor]] = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        self.buffer.validate()

    def _rows(self, key: str, adapter: AdapterParams | None) -> list[Tensor]:
        if key not in self._fixed_rows:
            prefix = len(self.buffer.prompt)
            with torch.no_grad():
                self._fixed_rows[key] = [
                    self.net.score(t.thought.sequence, prefix, adapter)[1]
                    for t in self.buffer.trajectories
                ]
        return self._fixed_rows[key]

    def loss(self, adapter: AdapterParams) -> tuple[Tensor, dict[str, float]]:
        cfg = self.config
        prefix = len(self.buffer.prompt)
        ref_rows = self._rows("ref", self.ref) if cfg.beta > 0 else None
        anchor_rows = self._rows("anchor", self.anchor) if cfg.fixed_kl > 0 else None

        objectives = []
        policy_terms, kl_refs, kl_fixeds = [], [], []
        ratios = []
        clipped = 0
        n_tokens = 0
        for i, (traj, adv) in enumerate(zip(self.buffer.trajectories, self.buffer.advantages, strict=True)):
            logp, rows = self.net.score(traj.thought.sequence, prefix, adapter)
            old = torch.tensor(traj.thought.gen_logprobs, dtype=logp.dtype)
            ratio = torch.exp(logp - old)
            unclipped = ratio * adv
            clipped_term = torch.clamp(ratio, 1 - cfg.epsilon, 1 + cfg.epsilon) * adv
            surrogate = torch.minimum(unclipped, clipped_term)
            per_token = surrogate
            kl_ref = torch.zeros_like(surrogate)
            kl_fixed = torch.zeros_like(surrogate)
            if ref_rows is not None:
                kl_ref = _kl_rows(rows, ref_rows[i])
                per_token = per_token - cfg.beta * kl_ref
            if anchor_rows is not None:
                kl_fixed = _kl_rows(rows, anchor_rows[i])
                per_token = per_token - cfg.fixed_kl * kl_fixed
            objectives.append(per_token.mean())

            policy_terms.append(float(surrogate.mean()))
            kl_refs.append(float(kl_ref.mean()))
            kl_fixeds.append(float(kl_fixed.mean()))
            r = ratio.detach()
            ratios.append(r)
            clipped += int(((r < 1 - cfg.epsilon) | (r > 1 + cfg.epsilon)).sum())
            n_tokens += r.numel()

        loss = -torch.stack(objectives).mean()
        all_ratios = torch.cat(ratios)
        g = len(objectives)
        terms = {
            "policy_term": sum(policy_terms) / g,
            "kl_ref": sum(kl_refs) / g,
            "kl_fixed": sum(kl_fixeds) / g,
            "mean_ratio": float(all_ratios.mean()),
            "max_ratio": float(all_ratios.max()),
            "clip_fraction": clipped / n_tokens,
        }
        return loss, terms


def grpo_loss(
    net: PolicyNet,
    buffer: GroupBuffer,
    adapter: AdapterParams,
    ref: AdapterParams | None,
    config: GrpoConfig,
    anchor: AdapterParams | None = None,
) -> tuple[Tensor, dict[str, float]]:
    """Scalar loss (differentiable in the adapter) and its diagnostics."""
    return GrpoLossSpec(net=net, buffer=buffer, config=config, ref=ref, anchor=anchor).loss(adapter)


@torch.no_grad()
def mean_token_kl(net: PolicyNet, buffer: GroupBuffer, adapter: AdapterParams, other: AdapterParams) -> float:
    """Mean over the group of the per-trajectory mean token KL(adapter || other)"""
    prefix = len(buffer.prompt)
    values = []
    for t in buffer.trajectories:
        _, rows = net.score(t.thought.sequence, prefix, adapter)
        _, other_rows = net.score(t.thought.sequence, prefix, other)
        values.append(float(_kl_rows(rows, other_rows).mean()))
    return sum(values) / len(values)


def internalize(
    net: PolicyNet,
    buffer: GroupBuffer,
    adapter: AdapterParams,
    opt: OptimizerState,
    refs: ReferencePolicies,
    config: GrpoConfig,
    ledger: BudgetLedger | None = None,
) -> InternalizeRecord:
    """
    E epochs of (loss -> adapter gradient -> Adam step) on one group.

    Old log-probs stay the generation-time values for every epoch. The
    reference adapter is synced after every `ref_sync_every` calls.

    Right after a sync the adapter equals the reference, where the beta term
    has zero gradient, so beta only shapes `post_kl` across repeated calls.
    """
    if not buffer.trajectories:
        raise GroupBufferError("cannot internalize an empty group")
    if any(r >= 1.0 for r in buffer.rewards):
        raise GroupBufferError("group contains a solving trajectory")
    if buffer.advantages is None:
        buffer.advantages = compute_advantages(buffer.rewards, config)

    spec = GrpoLossSpec(
        net=net,
        buffer=buffer,
        config=config,
        ref=refs.ref.adapter,
        anchor=refs.anchor,
    )
    first_loss = None
    terms: dict[str, float] = {}
    for epoch in range(config.epochs):
        started = time.perf_counter()
        bundle = backward_adapter(spec, adapter)
        apply_update(adapter, bundle, opt)
        if ledger is not None:
            ledger.record_backward((time.perf_counter() - started) * 1000)
        if first_loss is None:
            first_loss = bundle.loss
            terms = bundle.terms
        logger.debug(f"internalize epoch {epoch + 1}/{config.epochs}: loss={bundle.loss:.6f}")

    post_kl = mean_token_kl(net, buffer, adapter, refs.ref.adapter)
    synced = refs.after_update(adapter, config)
    return InternalizeRecord(
        step=refs.updates,
        parent=buffer.parent,
        loss=first_loss,
        policy_term=terms["policy_term"],
        kl_ref=terms["kl_ref"],
        kl_fixed=terms["kl_fixed"],
        mean_ratio=terms["mean_ratio"],
        max_ratio=terms["max_ratio"],
        clip_fraction=terms["clip_fraction"],
        advantages=list(buffer.advantages),
        post_kl=post_kl,
        ref_synced=synced,
    )
