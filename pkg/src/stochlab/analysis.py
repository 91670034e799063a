"""Diagnostics: Q/K/V cosine similarity to the frozen model, finite-difference
gradient checks and attention/forward operation counts."""

from __future__ import annotations

import csv
import io
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import counters
from .stochca import KVCache, check_compatible, gated_attention
from .tensor import Tape, backward, cross_entropy_loss, no_grad
from .vit import ViTModel, as_batch, encode, forward, qkv_recorder

QKV = ("q", "k", "v")
AGGREGATION_NOTE = (
    "pure-SA activations; cosine per token on concatenated heads; "
    "mean over tokens, then over images; Avg. = mean over layers"
)


@dataclass
class SimilarityReport:
    layers: list[dict[str, float]]  # one {"q","k","v"} dict per layer
    zero_norm_count: int = 0
    num_images: int = 0
    note: str = AGGREGATION_NOTE

    @property
    def avg(self) -> dict[str, float]:
        return {c: float(np.mean([row[c] for row in self.layers])) for c in QKV}

    def column(self, c: str) -> list[float]:
        return [row[c] for row in self.layers]

    def to_dict(self) -> dict:
        return {
            "layers": self.layers,
            "avg": self.avg,
            "zero_norm_count": self.zero_norm_count,
            "num_images": self.num_images,
            "note": self.note,
        }


def _token_cosine(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, int]:
    """Cosine along the last axis; zero-norm pairs contribute 0 and are counted."""
    # sqrt of the product (not product of norms) keeps self-similarity exactly 1
    denom = np.sqrt((a * a).sum(-1) * (b * b).sum(-1))
    zero = denom == 0
    cos = np.where(zero, 0.0, (a * b).sum(-1) / np.where(zero, 1.0, denom))
    return np.clip(cos, -1.0, 1.0), int(zero.sum())


def layer_qkv(model: ViTModel, images) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    store: list = []
    with no_grad():
        encode(as_batch(images), model, qkv_recorder(store), role="analysis")
    return [(q.data, k.data, v.data) for q, k, v in store]


def cosine_similarity_report(
    target: ViTModel, frozen: ViTModel, images, batch_size: int = 128
) -> SimilarityReport:
    check_compatible(frozen, target)
    images = as_batch(images)
    depth = target.config.depth
    sums = np.zeros((depth, 3))
    zeros = 0
    for start in range(0, len(images), batch_size):
        chunk = images[start : start + batch_size]
        for l, (t_acts, f_acts) in enumerate(zip(layer_qkv(target, chunk), layer_qkv(frozen, chunk))):
            for j in range(3):
                cos, z = _token_cosine(t_acts[j], f_acts[j])
                zeros += z
                sums[l, j] += cos.mean(axis=1).sum()  # per-image token mean
    means = sums / max(len(images), 1)
    layers = [{c: float(means[l, j]) for j, c in enumerate(QKV)} for l in range(depth)]
    return SimilarityReport(layers, zeros, len(images))


def similarity_table_csv(reports: dict[str, SimilarityReport]) -> str:
    """Rows = layers + Avg.; column groups = Query/Key/Value x method."""
    methods = list(reports)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["Layer"] + [f"{name}:{m}" for name in ("Query", "Key", "Value") for m in methods])
    depth = len(next(iter(reports.values())).layers)
    for l in range(depth):
        w.writerow([l + 1] + [f"{reports[m].layers[l][c]:.6f}" for c in QKV for m in methods])
    w.writerow(["Avg."] + [f"{reports[m].avg[c]:.6f}" for c in QKV for m in methods])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# gradient check


class GradCheckError(AssertionError):
    pass


PARAM_FAMILIES = {
    "embedding": ("patch.", "cls", "pos"),
    "w_q": (".attn.w_q",),
    "w_k": (".attn.w_k",),
    "w_v": (".attn.w_v",),
    "w_o": (".attn.w_o",),
    "mlp": (".mlp.",),
    "norm": ("norm",),
    "classifier": ("head.",),
}


def _family(name: str) -> str:
    for fam, keys in PARAM_FAMILIES.items():
        if any(k in name for k in keys):
            return fam
    return "other"


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst: tuple[str, tuple[int, ...]]
    checked: list[tuple[str, tuple[int, ...]]] = field(default_factory=list)
    families: set[str] = field(default_factory=set)


def grad_check(
    model: ViTModel,
    images,
    labels,
    step: float = 1e-6,
    n_params: int = 200,
    seed: int = 0,
    gates=None,
    cache: KVCache | None = None,
    tol: float = 1e-5,
    floor: float = 1e-4,
    raise_on_fail: bool = True,
) -> GradCheckResult:
    """Central differences vs. analytic gradients of the cross-entropy loss.

    Checks ``n_params`` scalar entries drawn across every parameter family of
    ``model`` (only ``model`` is perturbed; a frozen model behind ``cache`` is
    never touched). Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    images = as_batch(images)
    hook = None if gates is None else gated_attention(cache, np.asarray(gates, dtype=bool))

    def loss_value() -> float:
        with no_grad():
            return cross_entropy_loss(forward(images, model, hook), labels).item()

    with Tape() as tape:
        loss = cross_entropy_loss(forward(images, model, hook), labels)
    model.zero_grad()
    backward(tape, loss)

    rng = np.random.default_rng(seed)
    names = list(model.params)
    by_family: dict[str, list[str]] = {}
    for n in names:
        by_family.setdefault(_family(n), []).append(n)
    picks: list[tuple[str, tuple[int, ...]]] = []
    fams = sorted(by_family)
    for i in range(n_params):
        fam = fams[i % len(fams)]
        name = by_family[fam][rng.integers(len(by_family[fam]))]
        shape = model.params[name].shape
        picks.append((name, tuple(int(rng.integers(s)) for s in shape)))

    worst, worst_at = 0.0, picks[0]
    for name, idx in picks:
        t = model.params[name]
        analytic = 0.0 if t.grad is None else float(t.grad[idx])
        orig = t.data[idx]
        t.data[idx] = orig + step
        up = loss_value()
        t.data[idx] = orig - step
        down = loss_value()
        t.data[idx] = orig
        numeric = (up - down) / (2 * step)
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
        if rel > worst:
            worst, worst_at = rel, (name, idx)
    model.zero_grad()
    result = GradCheckResult(worst, worst_at, picks, {_family(n) for n, _ in picks})
    if raise_on_fail and worst > tol:
        raise GradCheckError(f"max relative error {worst:.3e} at {worst_at}")
    return result


# ---------------------------------------------------------------------------
# operation counts


def op_counter(run: Callable[[], object]) -> Counter:
    """Run ``run()`` and return the attention/forward events it produced."""
    with counters.counting() as c:
        run()
    return Counter(c)
