"""Stochastic cross-attention fine-tuning.

During training every attention layer of the target model independently
either self-attends (probability ``1 - p``) or cross-attends: its own queries
against the keys/values the frozen pretrained model produced at the same
layer for the same images. Inference is plain self-attention and never needs
the frozen model.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import counters
from .attention import AttentionParams, multi_head_attention
from .optim import AdamW
from .tensor import ContractError, Tape, Tensor, backward, cross_entropy_loss, no_grad, where_batch
from .vit import ConfigError, ViTModel, as_batch, encode, forward, qkv_recorder


class FrozenModelError(RuntimeError):
    """A gradient or update reached the frozen reference model."""


@dataclass
class KVCache:
    """Per-layer keys/values ``[b, n, d]`` of the frozen model; plain arrays, no gradient."""

    keys: list[np.ndarray]
    values: list[np.ndarray]

    def __post_init__(self):
        if len(self.keys) != len(self.values):
            raise ContractError("keys and values must cover the same layers")

    @property
    def depth(self) -> int:
        return len(self.keys)

    def layer(self, l: int) -> tuple[np.ndarray, np.ndarray]:
        return self.keys[l], self.values[l]


def draw_gates(p: float, depth: int, rng: np.random.Generator, batch: int | None = None) -> np.ndarray:
    """Bernoulli(p) cross-attention decisions.

    Returns ``[depth]`` booleans, or ``[batch, depth]`` for per-sample gating.
    """
    if not 0.0 <= p <= 1.0:
        raise ContractError(f"cross-attention probability must lie in [0, 1], got {p}")
    shape = (depth,) if batch is None else (batch, depth)
    return rng.random(shape) < p


@dataclass
class GateSchedule:
    """Reproducible stream of gate draws, one draw per training step."""

    p: float
    seed: int
    depth: int
    per_sample: bool = False
    draws: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ContractError(f"cross-attention probability must lie in [0, 1], got {self.p}")
        self._rng = np.random.default_rng(self.seed)

    def next(self, batch: int) -> np.ndarray:
        gates = draw_gates(self.p, self.depth, self._rng, batch if self.per_sample else None)
        self.draws.append(gates)
        return gates

    def ca_frequency(self) -> float:
        if not self.draws:
            return float("nan")
        return float(np.mean(np.concatenate([d.reshape(-1) for d in self.draws])))


def check_compatible(frozen: ViTModel, target: ViTModel) -> None:
    if not frozen.config.same_architecture(target.config):
        raise ConfigError("frozen and target models must share the same architecture")


def extract_kv(frozen: ViTModel, images, target: ViTModel | None = None) -> KVCache:
    """Run the frozen model with pure SA and keep each layer's projected keys/values."""
    if target is not None:
        check_compatible(frozen, target)
    x = as_batch(images)
    store: list = []
    with no_grad():
        encode(x, frozen, qkv_recorder(store), role="frozen")
    counters.record(counters.FROZEN_FORWARD)
    counters.record(counters.FROZEN_IMAGES, x.shape[0])
    return KVCache([k.data for _, k, _ in store], [v.data for _, _, v in store])


def gated_attention(cache: KVCache | None, gates: np.ndarray):
    """Layer hook choosing CA (gate true) or SA (gate false) per layer, or per sample."""
    gates = np.asarray(gates, dtype=bool)

    def layer(l: int, x: Tensor, params: AttentionParams) -> Tensor:
        g = gates[..., l]
        if not g.any():
            return multi_head_attention(x, params)
        if cache is None:
            raise ContractError("a cross-attention gate is set but no KV cache was given")
        ca = multi_head_attention(x, params, cache.layer(l))
        if g.all():
            return ca
        return where_batch(g, ca, multi_head_attention(x, params))

    return layer


def stochca_forward(target: ViTModel, cache: KVCache | None, gates, images) -> Tensor:
    gates = np.asarray(gates, dtype=bool)
    depth = target.config.depth
    if gates.shape[-1] != depth or gates.ndim > 2:
        raise ContractError(f"need {depth} gates per draw, got shape {gates.shape}")
    if cache is not None and cache.depth != depth:
        raise ContractError(f"KV cache covers {cache.depth} layers, model has {depth}")
    return forward(images, target, gated_attention(cache, gates))


def assert_frozen_untouched(frozen: ViTModel | None) -> None:
    if frozen is None:
        return
    for name, t in frozen.params.items():
        if t.grad is not None:
            raise FrozenModelError(f"frozen parameter {name} received a gradient")


def train_step(
    target: ViTModel,
    frozen: ViTModel,
    batch: tuple[np.ndarray, np.ndarray],
    p: float,
    opt: AdamW,
    rng: np.random.Generator | GateSchedule,
    per_sample: bool = False,
) -> float:
    """One StochCA update of ``target`` in place; returns the batch loss.

    Gates are drawn once per step (shared across the batch unless
    ``per_sample``). ``rng`` may be a bare generator or a :class:`GateSchedule`.
    """
    images, labels = batch
    b = as_batch(images).shape[0]
    if isinstance(rng, GateSchedule):
        gates = rng.next(b)
    else:
        gates = draw_gates(p, target.config.depth, rng, b if per_sample else None)
    cache = extract_kv(frozen, images, target) if p > 0 else None
    with Tape() as tape:
        loss = cross_entropy_loss(stochca_forward(target, cache, gates, images), labels)
    target.zero_grad()
    backward(tape, loss)
    assert_frozen_untouched(frozen)
    opt.step(target.params)
    return loss.item()


def infer(target: ViTModel, images) -> Tensor:
    """Deployment path: pure self-attention, no frozen model, no cache."""
    return forward(images, target)
