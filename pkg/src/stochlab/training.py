"""Method-agnostic training and evaluation loops."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .baselines import (
    BaselineKind,
    ft_train_step,
    ftca_train_step,
    inference_logits,
    l2reg_train_step,
)
from .optim import AdamW, OptimConfig
from .stochca import GateSchedule, train_step
from .vit import ViTModel


def derive_seed(*keys: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


@dataclass
class MethodParams:
    p: float = 0.0
    lam: float = 0.0
    per_sample: bool = False
    ftca_loss: str = "logits"


def batch_stream(n: int, batch_size: int, seed: int):
    """Endless minibatch index stream, reshuffled every epoch."""
    rng = np.random.default_rng(derive_seed(seed, 1))
    bs = min(batch_size, n)
    while True:
        order = rng.permutation(n)
        for start in range(0, n - bs + 1, bs):
            yield order[start : start + bs]


def fit(
    kind: BaselineKind,
    target: ViTModel,
    frozen: ViTModel | None,
    images: np.ndarray,
    labels: np.ndarray,
    optim: OptimConfig,
    seed: int,
    method: MethodParams | None = None,
    callback=None,
) -> list[float]:
    """Train ``target`` in place for ``optim.total_steps`` steps; returns per-step losses.

    ``callback(step)`` runs after every update (e.g. periodic validation).
    """
    method = method or MethodParams()
    if kind is not BaselineKind.FT and frozen is None:
        raise ValueError(f"{kind.label} needs a frozen reference model")
    opt = AdamW(optim)
    gates = GateSchedule(method.p, derive_seed(seed, 2), target.config.depth, method.per_sample)
    stream = batch_stream(len(labels), optim.batch_size, seed)
    losses = []
    for step in range(optim.total_steps):
        idx = next(stream)
        batch = (images[idx], labels[idx])
        if kind is BaselineKind.FT:
            loss = ft_train_step(target, batch, opt)
        elif kind is BaselineKind.STOCHCA:
            loss = train_step(target, frozen, batch, method.p, opt, gates)
        elif kind is BaselineKind.L2REG:
            loss = l2reg_train_step(target, frozen, batch, method.lam, opt)
        else:
            loss = ftca_train_step(target, frozen, batch, opt, method.ftca_loss)
        losses.append(loss)
        if callback is not None:
            callback(step)
    return losses


def predict_labels(kind, target, frozen, images, batch_size: int = 256) -> np.ndarray:
    out = []
    for start in range(0, len(images), batch_size):
        out.append(inference_logits(kind, target, frozen, images[start : start + batch_size]).data.argmax(1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def accuracy(kind, target, frozen, images, labels) -> float:
    if len(labels) == 0:
        return float("nan")
    return float(np.mean(predict_labels(kind, target, frozen, images) == labels))
