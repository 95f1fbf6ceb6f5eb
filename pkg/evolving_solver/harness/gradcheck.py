"""
Finite-difference check of the adapter gradient of the GRPO loss on random groups.
"""

import logging
import math
import random

import torch

from ..engine.adapter_engine import discard, fd_check, init_adapter
from ..engine.corpus_pretrain import heldout_tasks
from ..engine.grpo import GroupBuffer, GrpoLossSpec, ReferencePolicies, Trajectory, compute_advantages
from ..engine.policy_net import PolicyNet, ReasoningState
from ..models.config import AdapterConfig, GrpoConfig

logger = logging.getLogger(__name__)

# Scale of the noise that moves the adapter off its references (and B off zero)
PERTURBATION = 0.02


def _perturb(tensors: list[torch.Tensor], generator: torch.Generator) -> None:
    with torch.no_grad():
        for t in tensors:
            t.add_(PERTURBATION * torch.randn(t.shape, generator=generator, dtype=t.dtype))


def random_group_check(
    net: PolicyNet,
    seed: int,
    group_size: int = 3,
    n_coords: int = 10,
    step: float = 1e-4,
    max_new_tokens: int = 12,
    grpo: GrpoConfig | None = None,
    adapter_config: AdapterConfig | None = None,
) -> float:
    """
    Worst relative gradient error on one random group.

    Thoughts are sampled with the adapter at temperature 1, rewards drawn in
    [0, 0.9) and the adapter moved off its references so every loss term is active.
    """
    grpo = grpo or GrpoConfig()
    generator = torch.Generator().manual_seed(seed)
    rng = random.Random(f"gradcheck:{seed}")
    task = heldout_tasks(1, difficulty=rng.randint(1, 4), offset=seed)[0]

    adapter = init_adapter(net, adapter_config or AdapterConfig(), seed)
    _perturb([adapter.B[name] for name in adapter.names], generator)
    state = ReasoningState(task=task)
    trajectories = [
        Trajectory(
            node_id=i + 1,
            thought=net.sample_thought(state, adapter, 1.0, max_new_tokens, generator),
            reward=rng.uniform(0.0, 0.9),
        )
        for i in range(group_size)
    ]
    buffer = GroupBuffer(parent=0, trajectories=trajectories)
    buffer.advantages = compute_advantages(buffer.rewards, grpo)
    refs = ReferencePolicies.start(adapter)
    _perturb(adapter.tensors(), generator)
    try:
        spec = GrpoLossSpec(net=net, buffer=buffer, config=grpo, ref=refs.ref.adapter, anchor=refs.anchor)
        return fd_check(spec, adapter, step, n_coords, generator)
    finally:
        refs.release()
        discard(adapter)


def check_gradients(
    net: PolicyNet, n_groups: int = 10, n_coords: int = 100, step: float = 1e-4, seed: int = 0
) -> float:
    """Worst relative error over n_groups random groups probing n_coords coordinates in total."""
    if n_groups < 1 or n_coords < 1:
        raise ValueError("need at least one group and one coordinate")
    per_group = math.ceil(n_coords / n_groups)
    worst = 0.0
    for g in range(n_groups):
        err = random_group_check(net, seed + g, n_coords=per_group, step=step)
        logger.info(f"group {g + 1}/{n_groups}: worst relative error {err:.3e}")
        worst = max(worst, err)
    return worst
