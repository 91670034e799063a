"""Comparison methods: vanilla fine-tuning, Q/K/V activation regularization,
and the two-path SA+CA ensemble with its SA-only deployment variant."""

from __future__ import annotations

from enum import Enum

import numpy as np

from . import counters
from .optim import AdamW
from .stochca import assert_frozen_untouched, check_compatible, extract_kv, gated_attention
from .tensor import Tape, Tensor, add, backward, cross_entropy_loss, no_grad, scale, sub, tsum
from .vit import ViTModel, as_batch, encode, forward, qkv_recorder


class BaselineKind(str, Enum):
    FT = "ft"
    L2REG = "l2reg"
    FTCA = "ftca"
    FTCA_ONLYSA = "ftca_onlysa"
    STOCHCA = "stochca"

    @property
    def label(self) -> str:
        return {
            "ft": "FT",
            "l2reg": "L2-Reg",
            "ftca": "FT+CA",
            "ftca_onlysa": "FT+CA (only SA)",
            "stochca": "StochCA",
        }[self.value]

    @property
    def uses_frozen_in_training(self) -> bool:
        return self is not BaselineKind.FT

    @property
    def uses_frozen_at_inference(self) -> bool:
        return self is BaselineKind.FTCA

    @classmethod
    def parse(cls, text: str) -> "BaselineKind":
        key = text.strip().lower().replace("+", "").replace("-", "").replace(" ", "")
        aliases = {"l2reg": "l2reg", "ftcaonlysa": "ftca_onlysa", "ftca_onlysa": "ftca_onlysa"}
        try:
            return cls(aliases.get(key, key))
        except ValueError:
            raise ValueError(
                f"unknown method {text!r}; expected one of {[k.value for k in cls]}"
            ) from None


def _update(target: ViTModel, tape: Tape, loss: Tensor, opt: AdamW, frozen=None) -> float:
    target.zero_grad()
    backward(tape, loss)
    assert_frozen_untouched(frozen)
    opt.step(target.params)
    return loss.item()


def ft_train_step(target: ViTModel, batch, opt: AdamW) -> float:
    images, labels = batch
    with Tape() as tape:
        loss = cross_entropy_loss(forward(images, target), labels)
    return _update(target, tape, loss, opt)


# ---------------------------------------------------------------------------
# L2-Reg


def frozen_activations(frozen: ViTModel, images) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    store: list = []
    with no_grad():
        encode(as_batch(images), frozen, qkv_recorder(store), role="frozen")
    counters.record(counters.FROZEN_FORWARD)
    counters.record(counters.FROZEN_IMAGES, as_batch(images).shape[0])
    return [(q.data, k.data, v.data) for q, k, v in store]


def qkv_penalty(target_acts, frozen_acts) -> Tensor:
    """Mean over layers and tokens of ``|dq|^2 + |dk|^2 + |dv|^2``."""
    total = None
    for t_qkv, f_qkv in zip(target_acts, frozen_acts):
        for t, f in zip(t_qkv, f_qkv):
            diff = sub(t, Tensor(f))
            per_token = tsum(diff * diff, axis=-1)
            term = per_token.mean()
            total = term if total is None else add(total, term)
    return scale(total, 1.0 / len(target_acts))


def l2reg_loss(target: ViTModel, frozen: ViTModel, images, labels, lam: float) -> Tensor:
    """Cross-entropy plus ``lam`` times the Q/K/V activation discrepancy to ``frozen``."""
    check_compatible(frozen, target)
    if lam == 0:
        return cross_entropy_loss(forward(images, target), labels)
    ref = frozen_activations(frozen, images)
    store: list = []
    logits = forward(images, target, qkv_recorder(store))
    return add(cross_entropy_loss(logits, labels), scale(qkv_penalty(store, ref), lam))


def l2reg_train_step(target: ViTModel, frozen: ViTModel, batch, lam: float, opt: AdamW) -> float:
    images, labels = batch
    with Tape() as tape:
        loss = l2reg_loss(target, frozen, images, labels, lam)
    return _update(target, tape, loss, opt, frozen)


# ---------------------------------------------------------------------------
# FT+CA ensemble


def ftca_paths(target: ViTModel, frozen: ViTModel, images) -> tuple[Tensor, Tensor]:
    """Logits of the all-SA path and of the all-CA path (both with target weights)."""
    check_compatible(frozen, target)
    cache = extract_kv(frozen, images)
    sa = forward(images, target)
    all_ca = np.ones(target.config.depth, dtype=bool)
    ca = forward(images, target, gated_attention(cache, all_ca))
    return sa, ca


def ftca_forward(target: ViTModel, frozen: ViTModel, images) -> Tensor:
    """Average of SA-path and CA-path logits."""
    sa, ca = ftca_paths(target, frozen, images)
    return scale(add(sa, ca), 0.5)


def ftca_train_step(
    target: ViTModel, frozen: ViTModel, batch, opt: AdamW, loss_mode: str = "logits"
) -> float:
    """``loss_mode='logits'``: CE of averaged logits; ``'losses'``: mean of the two path losses."""
    images, labels = batch
    with Tape() as tape:
        if loss_mode == "logits":
            loss = cross_entropy_loss(ftca_forward(target, frozen, images), labels)
        elif loss_mode == "losses":
            sa, ca = ftca_paths(target, frozen, images)
            loss = scale(add(cross_entropy_loss(sa, labels), cross_entropy_loss(ca, labels)), 0.5)
        else:
            raise ValueError(f"unknown FT+CA loss mode {loss_mode!r}")
    return _update(target, tape, loss, opt, frozen)


def ftca_onlysa_infer(target: ViTModel, images) -> Tensor:
    return forward(images, target)


def inference_logits(kind: BaselineKind, target: ViTModel, frozen: ViTModel | None, images) -> Tensor:
    """Deployment-time logits for each method."""
    if kind is BaselineKind.FTCA:
        with no_grad():
            return ftca_forward(target, frozen, images)
    with no_grad():
        return forward(images, target)
