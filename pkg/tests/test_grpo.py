"""Unit tests for group-relative policy optimization"""

import logging
import math

import pytest
import torch

from evolving_solver.engine.adapter_engine import OptimizerState, backward_adapter, discard, init_adapter
from evolving_solver.engine.grpo import (
    GroupBuffer,
    GrpoLossSpec,
    ReferencePolicies,
    Trajectory,
    compute_advantages,
    grpo_loss,
    internalize,
    kl_exact,
)
from evolving_solver.engine.policy_net import ReasoningState, Thought
from evolving_solver.errors import GroupBufferError
from evolving_solver.models.config import AdapterConfig, GrpoConfig
from evolving_solver.models.reports import BudgetLedger

# Disable logging during tests
logging.getLogger("evolving_solver.engine.grpo").setLevel(logging.CRITICAL)
logging.getLogger("evolving_solver.engine.adapter_engine").setLevel(logging.CRITICAL)


def make_group(net, task, rewards, seed=0, adapter=None) -> GroupBuffer:
    """Sibling thoughts sampled from one state, with the given rewards"""
    state = ReasoningState(task=task)
    gen = torch.Generator().manual_seed(seed)
    trajectories = [
        Trajectory(node_id=i + 1, thought=net.sample_thought(state, adapter, 1.0, 8, gen), reward=r)
        for i, r in enumerate(rewards)
    ]
    return GroupBuffer(parent=0, trajectories=trajectories)


@pytest.fixture
def adapter(tiny_net):
    a = init_adapter(tiny_net, AdapterConfig(), rng_seed=0)
    yield a
    discard(a)


class TestAdvantages:
    """Test group reward normalization"""

    def test_three_rewards(self):
        """Population std: {1, 0, 0.5} gives about +-1.2247 and 0"""
        adv = compute_advantages([1.0, 0.0, 0.5], GrpoConfig())
        assert adv[0] == pytest.approx(math.sqrt(1.5), abs=1e-4)
        assert adv[1] == pytest.approx(-math.sqrt(1.5), abs=1e-4)
        assert adv[2] == pytest.approx(0.0, abs=1e-12)

    def test_equal_rewards_give_zero(self):
        """No signal when every sibling scores the same"""
        assert compute_advantages([0.25] * 5, GrpoConfig()) == [0.0] * 5
        assert compute_advantages([0.0], GrpoConfig()) == [0.0]

    def test_clip(self):
        """One success among 25 failures sits exactly at the clip; among 49 it is clipped"""
        adv = compute_advantages([1.0] + [0.0] * 25, GrpoConfig())
        assert adv[0] == pytest.approx(5.0)
        adv = compute_advantages([1.0] + [0.0] * 49, GrpoConfig())
        assert adv[0] == 5.0
        assert max(compute_advantages([1.0] + [0.0] * 49, GrpoConfig(adv_clip=3.0))) == 3.0

    @pytest.mark.parametrize("seed", range(5))
    def test_zero_mean_unit_std(self, seed):
        """Unclipped advantages have mean 0 and population std 1"""
        gen = torch.Generator().manual_seed(seed)
        rewards = torch.rand(6, generator=gen, dtype=torch.float64).tolist()
        adv = torch.tensor(compute_advantages(rewards, GrpoConfig()), dtype=torch.float64)
        assert float(adv.mean()) == pytest.approx(0.0, abs=1e-12)
        assert float(adv.std(correction=0)) == pytest.approx(1.0, abs=1e-9)

    def test_shift_invariant(self):
        """Adding a constant to every reward leaves advantages unchanged"""
        base = compute_advantages([0.1, 0.4, 0.2], GrpoConfig())
        shifted = compute_advantages([0.6, 0.9, 0.7], GrpoConfig())
        assert shifted == pytest.approx(base, abs=1e-9)

    def test_small_spread_uses_eta(self):
        """Spreads below eta are divided by eta, not by the tiny std"""
        adv = compute_advantages([0.0, 1e-6], GrpoConfig(eta=1e-4))
        assert adv == pytest.approx([-5e-3, 5e-3])

    def test_empty(self):
        with pytest.raises(ValueError):
            compute_advantages([], GrpoConfig())


class TestKl:
    """Test the exact KL between token distributions"""

    def test_two_point_distribution(self):
        """KL([0.9, 0.1] || [0.5, 0.5]) = 0.9 ln 1.8 + 0.1 ln 0.2"""
        p = torch.log(torch.tensor([0.9, 0.1], dtype=torch.float64))
        q = torch.log(torch.tensor([0.5, 0.5], dtype=torch.float64))
        expected = 0.9 * math.log(1.8) + 0.1 * math.log(0.2)
        assert float(kl_exact(p, q)) == pytest.approx(expected, abs=1e-12)
        assert float(kl_exact(p, q)) == pytest.approx(0.368064, abs=1e-6)

    def test_zero_for_equal_and_shift_invariant(self):
        """Logits are normalized first, so a constant shift changes nothing"""
        logits = torch.tensor([[0.3, -1.0, 2.0]], dtype=torch.float64)
        assert float(kl_exact(logits, logits + 7.0)) == pytest.approx(0.0, abs=1e-12)

    def test_nonnegative(self):
        gen = torch.Generator().manual_seed(0)
        p = torch.randn(20, 31, generator=gen, dtype=torch.float64)
        q = torch.randn(20, 31, generator=gen, dtype=torch.float64)
        assert bool((kl_exact(p, q) >= 0).all())


class TestLoss:
    """Test the clipped surrogate with KL penalties"""

    def test_ratio_one_at_generation_policy(self, tiny_net, add_task, adapter):
        """At the sampling policy every ratio is 1, KLs are 0 and the loss is -mean(advantages)"""
        buffer = make_group(tiny_net, add_task, [0.5, 0.0, 0.25], adapter=adapter)
        buffer.advantages = compute_advantages(buffer.rewards, GrpoConfig())
        refs = ReferencePolicies.start(adapter)
        try:
            loss, terms = grpo_loss(tiny_net, buffer, adapter, refs.ref.adapter, GrpoConfig(), refs.anchor)
            assert float(loss) == pytest.approx(0.0, abs=1e-8)
            assert terms["mean_ratio"] == pytest.approx(1.0, abs=1e-8)
            assert terms["max_ratio"] == pytest.approx(1.0, abs=1e-8)
            assert terms["clip_fraction"] == 0.0
            assert terms["kl_ref"] == pytest.approx(0.0, abs=1e-12)
            assert terms["kl_fixed"] == pytest.approx(0.0, abs=1e-12)
        finally:
            refs.release()

    def test_surrogate_bounded_by_clip(self, tiny_net, add_task, adapter):
        """With stale old log-probs the surrogate never exceeds the clipped value"""
        buffer = make_group(tiny_net, add_task, [0.5, 0.0, 0.25], adapter=adapter)
        buffer.advantages = compute_advantages(buffer.rewards, GrpoConfig())
        # Pretend the thoughts were much less likely when sampled
        stale = [
            Trajectory(
                node_id=t.node_id,
                thought=Thought(
                    prompt=t.thought.prompt,
                    tokens=t.thought.tokens,
                    text=t.thought.text,
                    gen_logprobs=tuple(lp - 2.0 for lp in t.thought.gen_logprobs),
                ),
                reward=t.reward,
            )
            for t in buffer.trajectories
        ]
        stale_buffer = GroupBuffer(parent=0, trajectories=stale, advantages=buffer.advantages)
        config = GrpoConfig(beta=0.0, fixed_kl=0.0)
        _, terms = grpo_loss(tiny_net, stale_buffer, adapter, None, config)
        bound = sum((1 + config.epsilon) * max(a, 0.0) for a in buffer.advantages) / len(stale)
        assert terms["policy_term"] <= bound + 1e-9
        assert terms["clip_fraction"] == 1.0

    def test_duplicated_group_same_gradient(self, tiny_net, add_task, adapter):
        """Repeating every sibling leaves the loss and its adapter gradient unchanged"""
        buffer = make_group(tiny_net, add_task, [0.5, 0.0, 0.25], adapter=adapter)
        buffer.advantages = compute_advantages(buffer.rewards, GrpoConfig())
        doubled = GroupBuffer(parent=0, trajectories=buffer.trajectories * 2)
        doubled.advantages = compute_advantages(doubled.rewards, GrpoConfig())
        assert doubled.advantages == pytest.approx(buffer.advantages * 2, abs=1e-12)
        refs = ReferencePolicies.start(adapter)
        try:
            single, double = (
                backward_adapter(
                    GrpoLossSpec(net=tiny_net, buffer=b, config=GrpoConfig(), ref=refs.ref.adapter, anchor=refs.anchor),
                    adapter,
                )
                for b in (buffer, doubled)
            )
            assert double.loss == pytest.approx(single.loss, abs=1e-12)
            assert any(float(g.abs().max()) > 0 for g in single.grads.values())
            for name, g in single.grads.items():
                assert torch.allclose(double.grads[name], g, rtol=0, atol=1e-12)
        finally:
            refs.release()

    def test_clipped_tokens_get_no_gradient(self, tiny_net, add_task, adapter):
        """Ratios above 1 + epsilon with positive advantages contribute nothing"""
        buffer = make_group(tiny_net, add_task, [0.5, 0.25], adapter=adapter)
        # Every ratio is e^2, far outside the clip range
        stale = GroupBuffer(
            parent=0,
            trajectories=[
                Trajectory(
                    node_id=t.node_id,
                    thought=Thought(
                        prompt=t.thought.prompt,
                        tokens=t.thought.tokens,
                        text=t.thought.text,
                        gen_logprobs=tuple(lp - 2.0 for lp in t.thought.gen_logprobs),
                    ),
                    reward=t.reward,
                )
                for t in buffer.trajectories
            ],
            advantages=[1.0, 1.0],
        )
        config = GrpoConfig(beta=0.0, fixed_kl=0.0)
        spec = GrpoLossSpec(net=tiny_net, buffer=stale, config=config, ref=None, anchor=None)
        bundle = backward_adapter(spec, adapter)
        assert bundle.terms["clip_fraction"] == 1.0
        for g in bundle.grads.values():
            assert float(g.abs().max()) == 0.0
        # Finite differences agree: moving B does not change the loss
        name = adapter.names[0]
        with torch.no_grad():
            adapter.B[name].add_(1e-4)
            moved, _ = spec.loss(adapter)
            adapter.B[name].sub_(1e-4)
        assert float(moved) == pytest.approx(bundle.loss, abs=1e-12)

        # Fresh old log-probs put the same tokens inside the clip range, where the gradient is live
        buffer.advantages = [1.0, 1.0]
        spec = GrpoLossSpec(net=tiny_net, buffer=buffer, config=config, ref=None, anchor=None)
        live = backward_adapter(spec, adapter)
        assert any(float(g.abs().max()) > 0 for g in live.grads.values())

    def test_buffer_validation(self, tiny_net, add_task, tasks):
        """Siblings must share a prompt and carry advantages"""
        buffer = make_group(tiny_net, add_task, [0.0, 0.5])
        with pytest.raises(GroupBufferError):
            GrpoLossSpec(net=tiny_net, buffer=buffer, config=GrpoConfig(), ref=None, anchor=None)

        other = make_group(tiny_net, tasks[0], [0.25])
        mixed = GroupBuffer(parent=0, trajectories=buffer.trajectories + other.trajectories, advantages=[0.0] * 3)
        with pytest.raises(GroupBufferError):
            mixed.validate()


class TestInternalize:
    """Test one group update"""

    def test_update_lowers_loss(self, tiny_net, add_task, adapter):
        """E epochs move the adapter downhill on the group loss"""
        config = GrpoConfig(epochs=3)
        opt = OptimizerState(adapter, AdapterConfig(lr=1e-4))
        refs = ReferencePolicies.start(adapter)
        buffer = make_group(tiny_net, add_task, [0.5, 0.0, 0.25], adapter=adapter)
        ledger = BudgetLedger()
        try:
            record = internalize(tiny_net, buffer, adapter, opt, refs, config, ledger)
            spec = GrpoLossSpec(net=tiny_net, buffer=buffer, config=config, ref=refs.anchor, anchor=refs.anchor)
            after, _ = spec.loss(adapter)
            assert float(after) < record.loss
            assert adapter.step_counter == 3
            assert record.step == 1
            assert record.post_kl > 0
            assert not record.ref_synced
            assert record.advantages == pytest.approx(compute_advantages([0.5, 0.0, 0.25], config))
        finally:
            refs.release()
            discard(adapter, opt)

    def test_reference_syncs_every_ten(self, tiny_net, add_task, adapter):
        """The reference is replaced on the 10th internalization, not before"""
        config = GrpoConfig(epochs=1)
        opt = OptimizerState(adapter, AdapterConfig(lr=1e-3))
        refs = ReferencePolicies.start(adapter)
        try:
            synced = []
            for i in range(11):
                buffer = make_group(tiny_net, add_task, [0.5, 0.0], seed=i, adapter=adapter)
                synced.append(internalize(tiny_net, buffer, adapter, opt, refs, config).ref_synced)
            assert synced == [False] * 9 + [True, False]
            assert refs.ref.step == 10
            assert refs.ref.adapter is not refs.anchor
            assert refs.anchor.step_counter == 0
        finally:
            refs.release()
            discard(adapter, opt)

    def test_solving_trajectory_rejected(self, tiny_net, add_task, adapter):
        """Groups containing reward 1.0 never reach the optimizer"""
        opt = OptimizerState(adapter, AdapterConfig())
        refs = ReferencePolicies.start(adapter)
        try:
            buffer = make_group(tiny_net, add_task, [1.0, 0.0])
            with pytest.raises(GroupBufferError):
                internalize(tiny_net, buffer, adapter, opt, refs, GrpoConfig())
            assert adapter.step_counter == 0
        finally:
            refs.release()
            discard(adapter, opt)

    def test_equal_rewards_only_pull_toward_references(self, tiny_net, add_task, adapter):
        """Zero advantages at the anchor give a zero gradient, so nothing moves"""
        opt = OptimizerState(adapter, AdapterConfig())
        refs = ReferencePolicies.start(adapter)
        try:
            before = [t.detach().clone() for t in adapter.tensors()]
            buffer = make_group(tiny_net, add_task, [0.25, 0.25, 0.25], adapter=adapter)
            record = internalize(tiny_net, buffer, adapter, opt, refs, GrpoConfig(epochs=1))
            assert record.advantages == [0.0, 0.0, 0.0]
            for a, b in zip(before, adapter.tensors(), strict=True):
                assert torch.allclose(a, b.detach(), atol=1e-12)
        finally:
            refs.release()
            discard(adapter, opt)

    def test_best_sibling_becomes_more_likely(self, tiny_net, add_task, adapter):
        """The highest-reward sibling gains mean log-prob from one internalization"""
        opt = OptimizerState(adapter, AdapterConfig())
        refs = ReferencePolicies.start(adapter)
        buffer = make_group(tiny_net, add_task, [0.8, 0.0, 0.25, 0.5], adapter=adapter)
        best = buffer.trajectories[0].thought
        prefix = len(best.prompt)
        try:
            before = tiny_net.rescore(best.sequence, prefix, adapter).detach()
            internalize(tiny_net, buffer, adapter, opt, refs, GrpoConfig())
            after = tiny_net.rescore(best.sequence, prefix, adapter).detach()
            assert float(after.mean()) > float(before.mean())
        finally:
            refs.release()
            discard(adapter, opt)

    def test_one_unpenalized_step_prefers_higher_reward(self, tiny_net, add_task, adapter):
        """Without KL terms a single step never lowers the best trajectory's log-likelihood"""
        config = GrpoConfig(beta=0.0, fixed_kl=0.0, epochs=1)
        opt = OptimizerState(adapter, AdapterConfig())
        refs = ReferencePolicies.start(adapter)
        buffer = make_group(tiny_net, add_task, [0.5, 0.0, 0.25], adapter=adapter)
        best, worst = buffer.trajectories[0].thought, buffer.trajectories[1].thought
        prefix = len(best.prompt)

        def logps() -> tuple[torch.Tensor, torch.Tensor]:
            return (
                tiny_net.rescore(best.sequence, prefix, adapter).detach(),
                tiny_net.rescore(worst.sequence, prefix, adapter).detach(),
            )

        try:
            best_before, worst_before = logps()
            internalize(tiny_net, buffer, adapter, opt, refs, config)
            best_after, worst_after = logps()
            assert float(best_after.sum()) >= float(best_before.sum())
            gap_before = float(best_before.mean() - worst_before.mean())
            assert float(best_after.mean() - worst_after.mean()) > gap_before
        finally:
            refs.release()
            discard(adapter, opt)


class TestKlControl:
    """Test that a larger beta keeps repeated updates closer to the reference"""

    def test_post_kl_does_not_grow_with_beta(self, tiny_net, add_task):
        """Five updates of one seeded group at lr 1e-2: post-update KL is non-increasing in beta"""
        kls = []
        for beta in (0.002, 0.02, 0.2):
            adapter = init_adapter(tiny_net, AdapterConfig(lr=1e-2), rng_seed=0)
            opt = OptimizerState(adapter, AdapterConfig(lr=1e-2))
            refs = ReferencePolicies.start(adapter)
            buffer = make_group(tiny_net, add_task, [0.5, 0.0, 0.25, 0.75], seed=1)
            config = GrpoConfig(beta=beta, epochs=4)
            try:
                for _ in range(5):
                    record = internalize(tiny_net, buffer, adapter, opt, refs, config)
                kls.append(record.post_kl)
            finally:
                refs.release()
                discard(adapter, opt)
        assert kls[0] > 0
        assert kls[0] >= kls[1] >= kls[2]
