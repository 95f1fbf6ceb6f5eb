"""Pytest configuration and fixtures for solver tests"""

import logging

import pytest
import torch

from evolving_solver.engine.dsl_env import gen_task, parse_program
from evolving_solver.engine.evolution_loop import Policy
from evolving_solver.engine.policy_net import PolicyNet
from evolving_solver.engine.vocab import Vocabulary
from evolving_solver.models.config import EvolutionConfig, NetConfig, SearchConfig
from evolving_solver.models.dsl import TaskInstance, TestCase

logger = logging.getLogger(__name__)

# Small enough that a full forward pass is a fraction of a millisecond
TINY_NET = NetConfig(d_model=16, n_layers=1, n_heads=2, ff_mult=2, context=256)


def make_net(seed: int = 0, config: NetConfig = TINY_NET) -> PolicyNet:
    """Randomly initialized float64 policy, frozen"""
    net = PolicyNet(Vocabulary(), config)
    net.init_weights(torch.Generator().manual_seed(seed))
    return net.to(torch.float64).freeze()


@pytest.fixture
def vocab() -> Vocabulary:
    return Vocabulary()


@pytest.fixture
def tiny_net() -> PolicyNet:
    return make_net()


@pytest.fixture
def policy(tiny_net) -> Policy:
    return Policy(net=tiny_net)


@pytest.fixture
def add_task() -> TaskInstance:
    """Two-input addition task with a known solution"""
    return TaskInstance(
        task_id="add",
        difficulty=1,
        tests=[
            TestCase(input=[1, 2], expected=3),
            TestCase(input=[4, -1], expected=3),
            TestCase(input=[0, 0], expected=0),
            TestCase(input=[5, 5], expected=10),
        ],
        hidden_solution=parse_program("ADD"),
    )


@pytest.fixture
def tasks() -> list[TaskInstance]:
    return [gen_task(seed, difficulty) for seed, difficulty in [(1, 1), (2, 2), (3, 3), (4, 4)]]


@pytest.fixture
def small_config() -> EvolutionConfig:
    """Short solves: 4 simulations of 3 children, short thoughts"""
    return EvolutionConfig(
        search=SearchConfig(k=3, max_depth=4, max_simulations=4, max_new_tokens=12),
    )
