"""
Corpus generation and next-token pretraining of the base policy.

Examples are (empty-history task prompt, gold program) pairs. Training uses
masked cross-entropy on the program tokens and the closing EOS only; the
prompt tokens are context, never targets.

Corpus tasks use generator seeds below HELDOUT_SEED_BASE; evaluation suites
use seeds from HELDOUT_SEED_BASE up, so they never overlap.
"""

import logging
import random
from collections.abc import Callable
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F
from pydantic import Field, model_validator

from ..errors import NonFiniteError, TaskGenerationError
from ..models.base import CanonicalModel, canonical_dumps
from ..models.config import NetConfig, PretrainConfig, validate_difficulty_mix
from ..models.dsl import TaskInstance
from .dsl_env import gen_task
from .policy_net import PolicyNet, ReasoningState
from .vocab import EOS_ID, PAD_ID, SEP_ID, Vocabulary

logger = logging.getLogger(__name__)

HELDOUT_SEED_BASE = 1_000_000_000
# Attempts per requested example before giving up on deduplication
DEDUP_ATTEMPTS_PER_EXAMPLE = 50


class CorpusExample(CanonicalModel):
    tokens: list[int]
    mask: list[int]
    difficulty: int = Field(ge=1, le=4)

    @model_validator(mode="after")
    def _mask_matches(self) -> "CorpusExample":
        if len(self.mask) != len(self.tokens):
            raise ValueError(f"mask length {len(self.mask)} != token length {len(self.tokens)}")
        return self


def example_for(net: PolicyNet, task: TaskInstance) -> CorpusExample:
    """Prompt of the task with empty history, SEP, gold program, EOS; mask on program + EOS."""
    if task.hidden_solution is None:
        raise ValueError(f"task {task.task_id} has no solution")
    prompt = [*net.encode_state(ReasoningState(task=task)), SEP_ID]
    program = [*net.vocab.program(task.hidden_solution), EOS_ID]
    tokens = prompt + program
    if len(tokens) > net.config.context:
        raise ValueError(f"example for {task.task_id} exceeds the context window")
    return CorpusExample(
        tokens=tokens, mask=[0] * len(prompt) + [1] * len(program), difficulty=task.difficulty
    )


def gen_corpus(
    n: int, difficulty_mix: dict[int, float], seed: int, net: PolicyNet
) -> list[CorpusExample]:
    """
    n distinct examples across the difficulty mix, deterministic per seed.

    Duplicates by (tests, solution) are skipped.

    Raises:
        TaskGenerationError: could not find n distinct examples
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    mix = validate_difficulty_mix(difficulty_mix)
    levels = list(mix)
    weights = [mix[d] for d in levels]
    rng = random.Random(f"corpus:{seed}")
    seen: set[str] = set()
    out: list[CorpusExample] = []
    attempts = 0
    while len(out) < n:
        attempts += 1
        if attempts > n * DEDUP_ATTEMPTS_PER_EXAMPLE:
            raise TaskGenerationError(f"only {len(out)} distinct examples after {attempts - 1} attempts")
        difficulty = rng.choices(levels, weights)[0]
        task = gen_task(rng.randrange(HELDOUT_SEED_BASE), difficulty)
        key = canonical_dumps(
            [[t.model_dump(mode="json") for t in task.tests], task.hidden_solution.render()]
        )
        if key in seen:
            continue
        seen.add(key)
        out.append(example_for(net, task))
    logger.info(f"Generated corpus of {n} examples ({attempts - n} duplicates skipped)")
    return out


def write_corpus(path: Path, examples: list[CorpusExample]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as f:
        for ex in examples:
            f.write(ex.canonical_json() + "\n")


def read_corpus(path: Path) -> list[CorpusExample]:
    with path.open(encoding="utf-8") as f:
        return [CorpusExample.model_validate_json(line) for line in f if line.strip()]


def heldout_tasks(n: int, difficulty: int, offset: int = 0) -> list[TaskInstance]:
    """Evaluation tasks from the held-out seed range"""
    return [gen_task(HELDOUT_SEED_BASE + offset + i, difficulty) for i in range(n)]


def masked_lm_loss(logits: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy over positions where mask is 1"""
    per_token = F.cross_entropy(
        logits.reshape(-1, logits.shape[-1]), targets.reshape(-1), reduction="none"
    )
    m = mask.reshape(-1).to(per_token.dtype)
    return (per_token * m).sum() / m.sum().clamp(min=1.0)


def _batch(examples: list[CorpusExample]) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    width = max(len(ex.tokens) for ex in examples)
    tokens = torch.full((len(examples), width), PAD_ID, dtype=torch.long)
    mask = torch.zeros((len(examples), width), dtype=torch.long)
    for i, ex in enumerate(examples):
        tokens[i, : len(ex.tokens)] = torch.tensor(ex.tokens)
        mask[i, : len(ex.mask)] = torch.tensor(ex.mask)
    # Position t predicts token t+1
    return tokens[:, :-1], tokens[:, 1:], mask[:, 1:]


@dataclass
class PretrainResult:
    net: PolicyNet
    initial_loss: float
    final_loss: float
    curve: list[float] = field(default_factory=list)


def pretrain(
    corpus: list[CorpusExample],
    config: PretrainConfig,
    vocab: Vocabulary | None = None,
    net_config: NetConfig | None = None,
    on_epoch: Callable[[int, float], None] | None = None,
) -> PretrainResult:
    """
    Full-parameter next-token training in float32 with AdamW.

    Raises:
        ValueError: empty corpus
        NonFiniteError: a batch loss became NaN/inf
    """
    if not corpus:
        raise ValueError("cannot pretrain on an empty corpus")
    generator = torch.Generator().manual_seed(config.seed)
    net = PolicyNet(vocab or Vocabulary(), net_config)
    net.init_weights(generator)
    net.train()
    optimizer = torch.optim.AdamW(net.parameters(), lr=config.lr, weight_decay=config.weight_decay)

    with torch.no_grad():
        probe = corpus[: min(len(corpus), 256)]
        inputs, targets, mask = _batch(probe)
        initial = float(masked_lm_loss(net(inputs), targets, mask))
    logger.info(f"Pretraining on {len(corpus)} examples, initial loss {initial:.4f}")

    curve: list[float] = []
    for epoch in range(config.epochs):
        order = torch.randperm(len(corpus), generator=generator).tolist()
        total, batches = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            batch = [corpus[i] for i in order[start : start + config.batch_size]]
            inputs, targets, mask = _batch(batch)
            loss = masked_lm_loss(net(inputs), targets, mask)
            if not torch.isfinite(loss):
                raise NonFiniteError(f"epoch {epoch + 1} batch {batches + 1}", f"non-finite loss {float(loss)}")
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            torch.nn.utils.clip_grad_norm_(net.parameters(), 1.0)
            optimizer.step()
            total += float(loss)
            batches += 1
        curve.append(total / batches)
        logger.info(f"epoch {epoch + 1}/{config.epochs}: loss {curve[-1]:.4f}")
        if on_epoch:
            on_epoch(epoch + 1, curve[-1])

    with torch.no_grad():
        net.eval()
        inputs, targets, mask = _batch(probe)
        final = float(masked_lm_loss(net(inputs), targets, mask))
    net.freeze()
    logger.info(f"Pretraining done: loss {initial:.4f} -> {final:.4f}")
    return PretrainResult(net=net, initial_loss=initial, final_loss=final, curve=curve)


# Held-out seed stride between suites generated with different suite seeds
SUITE_SEED_STRIDE = 100_000


def suite_tasks(n: int, difficulty_mix: dict[int, float], seed: int) -> list[TaskInstance]:
    """
    n held-out evaluation tasks across a difficulty mix, deterministic per seed.

    Raises:
        ValueError: n outside 1..SUITE_SEED_STRIDE, negative seed, or a bad mix
        TaskGenerationError: the generator gave up on a task
    """
    if not 1 <= n <= SUITE_SEED_STRIDE:
        raise ValueError(f"n must be in 1..{SUITE_SEED_STRIDE}, got {n}")
    if seed < 0:
        raise ValueError(f"suite seed must be >= 0, got {seed}")
    mix = validate_difficulty_mix(difficulty_mix)
    levels = list(mix)
    weights = [mix[d] for d in levels]
    rng = random.Random(f"suite:{seed}")
    base = HELDOUT_SEED_BASE + seed * SUITE_SEED_STRIDE
    return [gen_task(base + i, rng.choices(levels, weights)[0]) for i in range(n)]
