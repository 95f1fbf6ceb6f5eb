"""
Transient low-rank adapter: init, gradient, update, discard.

At solve time the base network is frozen and reverse mode runs only with
respect to the adapter factors (torch.autograd.grad over A and B), so no base
gradient is ever materialized. Everything here runs in the dtype of the base
network, float64 at solve time.
"""

import logging
import threading
from collections.abc import Iterator
from dataclasses import dataclass, field
from typing import Protocol

import torch
from torch import Tensor

from ..errors import NonFiniteError, ShapeMismatchError
from ..models.config import AdapterConfig
from .policy_net import PolicyNet

logger = logging.getLogger(__name__)

_live_lock = threading.Lock()
_live_bytes = 0


def live_adapter_bytes() -> int:
    """Bytes held by adapters that have not been discarded (this process)"""
    return _live_bytes


def _track(delta: int) -> None:
    global _live_bytes
    with _live_lock:
        _live_bytes += delta


class AdapterParams:
    """
    Per adapted projection: A (r x in_features) and B (out_features x r).

    The projection output becomes W0 x + (alpha / r) * B (A x).
    """

    def __init__(self, A: dict[str, Tensor], B: dict[str, Tensor], rank: int, alpha: float):
        if A.keys() != B.keys():
            raise ShapeMismatchError("A and B factors name different projections")
        self.A = A
        self.B = B
        self.rank = rank
        self.alpha = alpha
        self.step_counter = 0
        self._nbytes = sum(t.numel() * t.element_size() for t in self.tensors())
        self.released = False
        _track(self._nbytes)

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    @property
    def names(self) -> list[str]:
        return sorted(self.A)

    def delta(self, name: str, h: Tensor) -> Tensor | None:
        A = self.A.get(name)
        if A is None:
            return None
        return self.scale * ((h @ A.T) @ self.B[name].T)

    def named_tensors(self) -> Iterator[tuple[str, Tensor]]:
        """Factors in a fixed order: for each projection (sorted), A then B."""
        for name in self.names:
            yield f"{name}.A", self.A[name]
            yield f"{name}.B", self.B[name]

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.named_tensors()]

    def snapshot(self) -> "AdapterParams":
        """Frozen detached copy (reference / anchor policies)"""
        copy = AdapterParams(
            {n: t.detach().clone() for n, t in self.A.items()},
            {n: t.detach().clone() for n, t in self.B.items()},
            self.rank,
            self.alpha,
        )
        copy.step_counter = self.step_counter
        return copy

    def release(self) -> None:
        if self.released:
            return
        self.A.clear()
        self.B.clear()
        self.released = True
        _track(-self._nbytes)


def init_adapter(net: PolicyNet, config: AdapterConfig, rng_seed: int) -> AdapterParams:
    """A ~ N(0, init_std^2) from a seeded generator, B = 0, so the forward is unchanged."""
    generator = torch.Generator().manual_seed(rng_seed)
    A: dict[str, Tensor] = {}
    B: dict[str, Tensor] = {}
    for name, (out_f, in_f) in net.adapted_shapes(config.targets).items():
        a = torch.randn(config.rank, in_f, generator=generator, dtype=torch.float64)
        A[name] = (a * config.init_std).to(net.dtype).requires_grad_(True)
        B[name] = torch.zeros(out_f, config.rank, dtype=net.dtype).requires_grad_(True)
    return AdapterParams(A, B, config.rank, config.alpha)


class LossSpec(Protocol):
    """Anything that evaluates a scalar loss (and named diagnostics) at an adapter state"""

    def loss(self, adapter: AdapterParams) -> tuple[Tensor, dict[str, float]]: ...


@dataclass
class GradBundle:
    grads: dict[str, Tensor]
    loss: float
    terms: dict[str, float] = field(default_factory=dict)


def backward_adapter(loss_spec: LossSpec, adapter: AdapterParams) -> GradBundle:
    """
    Exact gradient of the loss with respect to the adapter factors only.

    Raises:
        NonFiniteError: loss or a gradient entry is NaN/inf (names the tensor)
    """
    loss, terms = loss_spec.loss(adapter)
    if not torch.isfinite(loss):
        raise NonFiniteError("loss", f"non-finite loss {float(loss)}")
    named = list(adapter.named_tensors())
    raw = torch.autograd.grad(loss, [t for _, t in named], allow_unused=True)
    grads: dict[str, Tensor] = {}
    for (name, t), g in zip(named, raw, strict=True):
        g = torch.zeros_like(t) if g is None else g.detach()
        if not torch.isfinite(g).all():
            raise NonFiniteError(name, "non-finite gradient")
        grads[name] = g
    return GradBundle(grads=grads, loss=float(loss), terms=terms)


class OptimizerState:
    """Adam moments over the adapter factors"""

    def __init__(self, adapter: AdapterParams, config: AdapterConfig):
        self.config = config
        self.optimizer = torch.optim.Adam(
            adapter.tensors(),
            lr=config.lr,
            betas=(config.beta1, config.beta2),
            eps=config.eps,
        )

    @property
    def step_count(self) -> int:
        states = [s for s in self.optimizer.state.values() if "step" in s]
        return int(states[0]["step"]) if states else 0

    def reset(self) -> None:
        self.optimizer.state.clear()


def apply_update(adapter: AdapterParams, grads: GradBundle, opt: OptimizerState) -> AdapterParams:
    """One Adam step descending the loss."""
    named = list(adapter.named_tensors())
    if set(grads.grads) != {n for n, _ in named}:
        raise ShapeMismatchError(f"gradient names {sorted(grads.grads)} do not match adapter")
    for name, t in named:
        g = grads.grads[name]
        if g.shape != t.shape:
            raise ShapeMismatchError(f"{name}: gradient {tuple(g.shape)} vs parameter {tuple(t.shape)}")
        t.grad = g.clone()
    opt.optimizer.step()
    opt.optimizer.zero_grad(set_to_none=True)
    adapter.step_counter += 1
    return adapter


def discard(adapter: AdapterParams, opt: OptimizerState | None = None) -> None:
    """Destroy the adapter and its optimizer moments."""
    if opt is not None:
        opt.reset()
        opt.optimizer.param_groups.clear()
    adapter.release()


def fd_check(
    loss_spec: LossSpec,
    adapter: AdapterParams,
    step: float,
    n_coords: int,
    generator: torch.Generator,
    floor: float = 1e-6,
) -> float:
    """
    Worst relative error between analytic and central-difference gradients on
    `n_coords` random adapter coordinates.

    relative error = |fd - analytic| / max(|fd|, |analytic|, floor)
    """
    if step <= 0:
        raise ValueError(f"step must be > 0, got {step}")
    bundle = backward_adapter(loss_spec, adapter)
    named = list(adapter.named_tensors())
    sizes = torch.tensor([t.numel() for _, t in named], dtype=torch.float64)
    worst = 0.0
    for _ in range(n_coords):
        which = int(torch.multinomial(sizes, 1, generator=generator))
        name, t = named[which]
        idx = int(torch.randint(t.numel(), (1,), generator=generator))
        flat = t.detach().view(-1)
        original = float(flat[idx])
        with torch.no_grad():
            flat[idx] = original + step
            plus = float(loss_spec.loss(adapter)[0])
            flat[idx] = original - step
            minus = float(loss_spec.loss(adapter)[0])
            flat[idx] = original
        fd = (plus - minus) / (2 * step)
        analytic = float(bundle.grads[name].view(-1)[idx])
        err = abs(fd - analytic) / max(abs(fd), abs(analytic), floor)
        worst = max(worst, err)
    logger.debug(f"fd_check: {n_coords} coordinates, step={step}, worst relative error {worst:.3e}")
    return worst
