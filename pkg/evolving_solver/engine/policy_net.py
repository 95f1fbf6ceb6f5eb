"""
Small causal-attention policy over the DSL vocabulary.

The network is a pre-norm transformer with fixed sinusoidal positions and an
output projection tied to the embedding. Each projection named in the adapter
(`blocks.{i}.q`, `blocks.{i}.v`, ...) computes W0 x + (alpha/r) B (A x) when an
adapter is passed, and W0 x otherwise. The adapter is an argument of every
call, never a submodule, so the base weights stay untouched by test-time
training.

Decoding recomputes the full prefix every step (no KV cache).
"""

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from ..errors import ContextOverflowError, VocabularyError
from ..models.config import NetConfig
from ..models.dsl import RewardReport, TaskInstance
from .vocab import BOS_ID, EOS_ID, SEP_ID, Vocabulary

if TYPE_CHECKING:
    from .adapter_engine import AdapterParams

logger = logging.getLogger(__name__)

PROJECTIONS = ("q", "k", "v", "o")


@dataclass(frozen=True, slots=True)
class Feedback:
    """Execution feedback of one thought, as tokens"""

    tokens: tuple[int, ...]
    report: RewardReport

    @classmethod
    def from_report(cls, vocab: Vocabulary, report: RewardReport) -> "Feedback":
        return cls(tokens=tuple(vocab.feedback(report)), report=report)


@dataclass(frozen=True, slots=True)
class Thought:
    """
    One generated candidate program.

    `prompt` is the exact context it was generated from; `gen_logprobs` are the
    untempered log-probabilities of `tokens` under the generating policy.
    """

    prompt: tuple[int, ...]
    tokens: tuple[int, ...]
    text: str
    gen_logprobs: tuple[float, ...]

    @property
    def mean_logprob(self) -> float:
        return sum(self.gen_logprobs) / len(self.gen_logprobs)

    @property
    def sequence(self) -> list[int]:
        return [*self.prompt, *self.tokens]


@dataclass(frozen=True, slots=True)
class HistoryEntry:
    thought: Thought
    feedback: Feedback


@dataclass(frozen=True, slots=True)
class ReasoningState:
    task: TaskInstance
    history: tuple[HistoryEntry, ...] = field(default_factory=tuple)

    def extend(self, *entries: HistoryEntry) -> "ReasoningState":
        return ReasoningState(task=self.task, history=(*self.history, *entries))


def sinusoidal_positions(context: int, d_model: int) -> Tensor:
    pos = torch.arange(context, dtype=torch.float64).unsqueeze(1)
    div = torch.exp(torch.arange(0, d_model, 2, dtype=torch.float64) * (-math.log(10000.0) / d_model))
    table = torch.zeros(context, d_model, dtype=torch.float64)
    table[:, 0::2] = torch.sin(pos * div)
    table[:, 1::2] = torch.cos(pos * div)
    return table


class Block(nn.Module):
    """Pre-norm causal self-attention followed by a two-layer feed-forward"""

    def __init__(self, index: int, config: NetConfig):
        super().__init__()
        d = config.d_model
        self.index = index
        self.n_heads = config.n_heads
        self.ln1 = nn.LayerNorm(d)
        self.q = nn.Linear(d, d, bias=False)
        self.k = nn.Linear(d, d, bias=False)
        self.v = nn.Linear(d, d, bias=False)
        self.o = nn.Linear(d, d, bias=False)
        self.ln2 = nn.LayerNorm(d)
        self.ff1 = nn.Linear(d, config.ff_mult * d)
        self.ff2 = nn.Linear(config.ff_mult * d, d)

    def project(self, name: str, h: Tensor, adapter: "AdapterParams | None") -> Tensor:
        out = getattr(self, name)(h)
        if adapter is not None:
            delta = adapter.delta(f"blocks.{self.index}.{name}", h)
            if delta is not None:
                out = out + delta
        return out

    def forward(self, x: Tensor, adapter: "AdapterParams | None") -> Tensor:
        B, T, C = x.shape
        hd = C // self.n_heads
        h = self.ln1(x)
        q = self.project("q", h, adapter).view(B, T, self.n_heads, hd).transpose(1, 2)
        k = self.project("k", h, adapter).view(B, T, self.n_heads, hd).transpose(1, 2)
        v = self.project("v", h, adapter).view(B, T, self.n_heads, hd).transpose(1, 2)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(hd)
        causal = torch.ones(T, T, dtype=torch.bool, device=x.device).triu(1)
        att = att.masked_fill(causal, float("-inf"))
        att = torch.softmax(att, dim=-1)
        y = (att @ v).transpose(1, 2).reshape(B, T, C)
        x = x + self.project("o", y, adapter)
        x = x + self.ff2(F.gelu(self.ff1(self.ln2(x))))
        return x


class PolicyNet(nn.Module):
    """
    Frozen base policy (theta) plus the decoding operations of the solver.

    Parameters are exactly: token embedding, per-block layer norms and
    projections, final layer norm. Positions are a fixed buffer and the output
    head reuses the embedding.
    """

    def __init__(self, vocab: Vocabulary, config: NetConfig | None = None):
        super().__init__()
        self.vocab = vocab
        self.config = config or NetConfig()
        c = self.config
        self.embed = nn.Embedding(len(vocab), c.d_model)
        self.blocks = nn.ModuleList([Block(i, c) for i in range(c.n_layers)])
        self.ln_f = nn.LayerNorm(c.d_model)
        self.register_buffer(
            "positions", sinusoidal_positions(c.context, c.d_model), persistent=False
        )

    # -- weights -----------------------------------------------------------

    def init_weights(self, generator: torch.Generator) -> None:
        """Deterministic init: normal(0, 0.02) matrices, zero biases, unit norms."""
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.endswith("bias"):
                    p.zero_()
                elif ".ln" in name or name.startswith("ln_"):
                    p.fill_(1.0)
                else:
                    p.copy_(torch.randn(p.shape, generator=generator, dtype=p.dtype) * 0.02)

    def freeze(self) -> "PolicyNet":
        self.requires_grad_(False)
        self.eval()
        return self

    @property
    def dtype(self) -> torch.dtype:
        return self.embed.weight.dtype

    def adapted_shapes(self, targets: Sequence[str]) -> dict[str, tuple[int, int]]:
        """(out_features, in_features) of every projection an adapter may target"""
        shapes = {}
        for i, block in enumerate(self.blocks):
            for name in targets:
                if name not in PROJECTIONS:
                    raise ValueError(f"unknown projection {name!r}")
                w = getattr(block, name).weight
                shapes[f"blocks.{i}.{name}"] = (w.shape[0], w.shape[1])
        return shapes

    # -- forward -----------------------------------------------------------

    def forward(self, tokens: Tensor | Sequence[int], adapter: "AdapterParams | None" = None) -> Tensor:
        """
        Logits for every position.

        A 1-D sequence gives (T, V); a (B, T) batch gives (B, T, V).
        """
        ids = tokens if isinstance(tokens, Tensor) else torch.tensor(list(tokens), dtype=torch.long)
        squeeze = ids.dim() == 1
        if squeeze:
            ids = ids.unsqueeze(0)
        T = ids.shape[1]
        if T > self.config.context:
            raise ContextOverflowError(f"sequence of {T} tokens exceeds context {self.config.context}")
        if T and (int(ids.min()) < 0 or int(ids.max()) >= len(self.vocab)):
            raise VocabularyError(f"token ids outside vocabulary of size {len(self.vocab)}")
        x = self.embed(ids) + self.positions[:T].to(self.dtype)
        for block in self.blocks:
            x = block(x, adapter)
        logits = self.ln_f(x) @ self.embed.weight.T
        return logits.squeeze(0) if squeeze else logits

    # -- state encoding ----------------------------------------------------

    def encode_state(self, state: ReasoningState, max_len: int | None = None) -> list[int]:
        """
        BOS + tests, then per history entry SEP + thought tokens + feedback tokens.

        When too long, whole history entries are dropped oldest first; the task
        segment is never dropped.
        """
        limit = self.config.context if max_len is None else max_len
        head = [BOS_ID, *self.vocab.tests(state.task)]
        if len(head) > limit:
            raise ContextOverflowError(
                f"task {state.task.task_id} needs {len(head)} tokens, limit is {limit}"
            )
        entries = [[SEP_ID, *e.thought.tokens, *e.feedback.tokens] for e in state.history]
        total = len(head) + sum(len(e) for e in entries)
        start = 0
        while total > limit:
            total -= len(entries[start])
            start += 1
        if start:
            logger.debug(f"Dropped {start} oldest history entries to fit {limit} tokens")
        out = head
        for e in entries[start:]:
            out.extend(e)
        return out

    def prompt(self, state: ReasoningState, max_new_tokens: int) -> list[int]:
        """Generation context: the encoded state, room for the thought, then SEP."""
        budget = self.config.context - max_new_tokens - 1
        return [*self.encode_state(state, max_len=budget), SEP_ID]

    # -- decoding ----------------------------------------------------------

    @torch.no_grad()
    def next_token_logits(self, ids: Sequence[int], adapter: "AdapterParams | None") -> Tensor:
        return self.forward(ids, adapter)[-1]

    @torch.no_grad()
    def sample_thought(
        self,
        state: ReasoningState,
        adapter: "AdapterParams | None",
        temperature: float,
        max_new_tokens: int,
        generator: torch.Generator,
    ) -> Thought:
        """Sample from softmax(logits / T); stored log-probs are untempered."""
        if temperature <= 0:
            raise ValueError(f"temperature must be > 0, got {temperature}")
        prompt = self.prompt(state, max_new_tokens)
        ids = list(prompt)
        out: list[int] = []
        logprobs: list[float] = []
        for _ in range(max_new_tokens):
            logits = self.next_token_logits(ids, adapter)
            probs = torch.softmax(logits / temperature, dim=-1)
            tok = int(torch.multinomial(probs, 1, generator=generator))
            logprobs.append(float(torch.log_softmax(logits, dim=-1)[tok]))
            out.append(tok)
            ids.append(tok)
            if tok == EOS_ID:
                break
        return self._thought(prompt, out, logprobs)

    @torch.no_grad()
    def greedy_decode(
        self, state: ReasoningState, adapter: "AdapterParams | None", max_new_tokens: int
    ) -> Thought:
        """Argmax per step; ties go to the lowest token id."""
        prompt = self.prompt(state, max_new_tokens)
        ids = list(prompt)
        out: list[int] = []
        logprobs: list[float] = []
        for _ in range(max_new_tokens):
            logits = self.next_token_logits(ids, adapter)
            # torch.argmax returns the first maximal index
            tok = int(torch.argmax(logits))
            logprobs.append(float(torch.log_softmax(logits, dim=-1)[tok]))
            out.append(tok)
            ids.append(tok)
            if tok == EOS_ID:
                break
        return self._thought(prompt, out, logprobs)

    def _thought(self, prompt: list[int], out: list[int], logprobs: list[float]) -> Thought:
        return Thought(
            prompt=tuple(prompt),
            tokens=tuple(out),
            text=self.vocab.render(out),
            gen_logprobs=tuple(logprobs),
        )

    @torch.no_grad()
    def step_distribution(
        self, state: ReasoningState, adapter: "AdapterParams | None", temperature: float, max_new_tokens: int
    ) -> Tensor:
        """Sampling distribution of the first generated token at a temperature"""
        logits = self.next_token_logits(self.prompt(state, max_new_tokens), adapter)
        return torch.softmax(logits / temperature, dim=-1)

    # -- scoring -----------------------------------------------------------

    def score(
        self, tokens: Sequence[int], prefix_len: int, adapter: "AdapterParams | None"
    ) -> tuple[Tensor, Tensor]:
        """
        Log-probabilities of the realized tokens at positions >= prefix_len, and
        the full log-softmax rows they were taken from. Differentiable.
        """
        if not 1 <= prefix_len < len(tokens):
            raise ValueError(f"prefix_len must be in [1, {len(tokens)}), got {prefix_len}")
        logits = self.forward(tokens, adapter)
        rows = torch.log_softmax(logits[prefix_len - 1 : -1], dim=-1)
        targets = torch.tensor(list(tokens[prefix_len:]), dtype=torch.long)
        return rows.gather(1, targets.unsqueeze(1)).squeeze(1), rows

    def rescore(self, tokens: Sequence[int], prefix_len: int, adapter: "AdapterParams | None") -> Tensor:
        return self.score(tokens, prefix_len, adapter)[0]
