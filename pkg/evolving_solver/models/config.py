"""
Configuration models for every module plus the experiment config that ties them together.

Defaults follow the reference hyperparameters (search: c_puct 1.414, k 3,
depth 8, 20 simulations, temperature 0.7; GRPO: clip 0.3, beta 0.02, fixed KL
0.005, 3 epochs, reference sync every 10 updates; adapter rank 8, lr 1e-4).
"""

from enum import StrEnum
from pathlib import Path

from pydantic import Field, field_validator, model_validator

from .base import CanonicalModel


class DslLimits(CanonicalModel):
    step_cap: int = Field(default=10_000, ge=1)


class NetConfig(CanonicalModel):
    """Shape of the base policy network"""

    d_model: int = Field(default=64, ge=8)
    n_layers: int = Field(default=2, ge=1)
    n_heads: int = Field(default=4, ge=1)
    ff_mult: int = Field(default=4, ge=1)
    context: int = Field(default=512, ge=32)

    @model_validator(mode="after")
    def _heads_divide_width(self) -> "NetConfig":
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        return self


class AdapterConfig(CanonicalModel):
    """Low-rank adapter shape and its optimizer"""

    rank: int = Field(default=8, ge=1)
    alpha: float = Field(default=16.0, gt=0)
    init_std: float = Field(default=0.02, gt=0)
    # Projections of each attention block that receive an adapter
    targets: tuple[str, ...] = ("q", "v")
    lr: float = Field(default=1e-4, gt=0)
    beta1: float = Field(default=0.9, ge=0, lt=1)
    beta2: float = Field(default=0.999, ge=0, lt=1)
    eps: float = Field(default=1e-8, gt=0)

    @field_validator("targets")
    @classmethod
    def _known_targets(cls, targets: tuple[str, ...]) -> tuple[str, ...]:
        unknown = set(targets) - {"q", "k", "v", "o"}
        if unknown or not targets:
            raise ValueError(f"adapter targets must be a nonempty subset of q,k,v,o, got {targets}")
        return targets

    @property
    def scale(self) -> float:
        return self.alpha / self.rank


class SearchConfig(CanonicalModel):
    c_puct: float = Field(default=1.414, ge=0)
    k: int = Field(default=3, ge=1)
    max_depth: int = Field(default=8, ge=1)
    max_simulations: int = Field(default=20, ge=1)
    temperature: float = Field(default=0.7, gt=0)
    max_new_tokens: int = Field(default=96, ge=1)

    @property
    def node_budget(self) -> int:
        return self.max_simulations * self.k


class GrpoConfig(CanonicalModel):
    epsilon: float = Field(default=0.3, gt=0)
    beta: float = Field(default=0.02, ge=0)
    fixed_kl: float = Field(default=0.005, ge=0)
    eta: float = Field(default=1e-4, gt=0)
    adv_clip: float = Field(default=5.0, gt=0)
    epochs: int = Field(default=3, ge=1)
    # Counted in internalizations (one group update of `epochs` passes)
    ref_sync_every: int = Field(default=10, ge=1)


class EvolutionConfig(CanonicalModel):
    """Everything a single solve needs besides the task, the base weights and the seed"""

    search: SearchConfig = Field(default_factory=SearchConfig)
    grpo: GrpoConfig = Field(default_factory=GrpoConfig)
    adapter: AdapterConfig = Field(default_factory=AdapterConfig)
    dsl: DslLimits = Field(default_factory=DslLimits)
    # Off gives the search-only ablation arm
    adaptation_enabled: bool = True
    # Outer steps; None means bounded by the simulation budget only
    max_outer_steps: int | None = Field(default=None, ge=1)

    @property
    def outer_step_limit(self) -> int:
        if self.max_outer_steps is None:
            return self.search.max_simulations
        return min(self.max_outer_steps, self.search.max_simulations)


class PretrainConfig(CanonicalModel):
    n_examples: int = Field(default=20_000, ge=1)
    difficulty_mix: dict[int, float] = Field(default_factory=lambda: {1: 0.4, 2: 0.3, 3: 0.2, 4: 0.1})
    epochs: int = Field(default=6, ge=1)
    batch_size: int = Field(default=64, ge=1)
    lr: float = Field(default=3e-3, gt=0)
    weight_decay: float = Field(default=0.0, ge=0)
    seed: int = 0

    @field_validator("difficulty_mix")
    @classmethod
    def _valid_mix(cls, mix: dict[int, float]) -> dict[int, float]:
        return validate_difficulty_mix(mix)


def validate_difficulty_mix(mix: dict[int, float]) -> dict[int, float]:
    """Difficulty keys in 1-4, nonnegative weights, positive total. Returns the mix normalized."""
    if not mix:
        raise ValueError("difficulty mix is empty")
    if any(d not in (1, 2, 3, 4) for d in mix):
        raise ValueError(f"difficulty keys must be in 1-4, got {sorted(mix)}")
    if any(w < 0 for w in mix.values()):
        raise ValueError("difficulty weights must be nonnegative")
    total = sum(mix.values())
    if total <= 0:
        raise ValueError("difficulty weights sum to zero")
    return {d: mix[d] / total for d in sorted(mix)}


class Method(StrEnum):
    GREEDY = "greedy"
    BEST_OF_N = "best_of_n"
    SEARCH_ONLY = "search_only"
    POT = "pot"


# Report table order, mirroring the ablation tables
METHOD_ORDER = (Method.GREEDY, Method.BEST_OF_N, Method.SEARCH_ONLY, Method.POT)


class ExperimentConfig(CanonicalModel):
    """
    One experiment: which snapshot and task suite, which method, which seeds.

    The canonical fingerprint covers every field, so any change to any module
    config yields a different fingerprint.
    """

    snapshot_path: Path = Path("artifacts/base.snapshot")
    # Expected weight checksum; solving refuses to start on mismatch when set
    snapshot_checksum: str | None = None
    suite_path: Path = Path("artifacts/suite.jsonl")
    method: Method = Method.POT
    best_of_n: int = Field(default=20, ge=1)
    # Raise best_of_n to the search node budget for strict node parity
    budget_parity: bool = False
    seeds: list[int] = Field(default_factory=lambda: [0], min_length=1)
    net: NetConfig = Field(default_factory=NetConfig)
    evolution: EvolutionConfig = Field(default_factory=EvolutionConfig)
    pretrain: PretrainConfig = Field(default_factory=PretrainConfig)
    out_dir: Path = Path("runs")

    @field_validator("seeds")
    @classmethod
    def _unique_seeds(cls, seeds: list[int]) -> list[int]:
        if len(set(seeds)) != len(seeds):
            raise ValueError(f"duplicate seeds in {seeds}")
        return seeds

    @property
    def effective_best_of_n(self) -> int:
        if self.budget_parity:
            return self.evolution.search.node_budget
        return self.best_of_n

    def for_method(self, method: Method) -> "ExperimentConfig":
        """Copy with another method; adaptation follows the method."""
        evolution = self.evolution.model_copy(
            update={"adaptation_enabled": method is not Method.SEARCH_ONLY}
        )
        return self.model_copy(update={"method": method, "evolution": evolution})
