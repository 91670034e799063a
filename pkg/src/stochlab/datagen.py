"""Procedural multi-domain shape classification data.

A class is a shape family (bar, ring, triangle, ...). A domain is a rendering
style (palette, foreground texture, noise). Geometry is drawn from a stream
keyed on ``(seed, class, index)`` only, so the same item rendered in two
domains has the same outline and differs only in style.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import load_arrays, save_arrays
from .tensor import ContractError

SHAPES = (
    "hbar",
    "vbar",
    "plus",
    "xcross",
    "frame",
    "disk",
    "ring",
    "slash",
    "block",
    "triangle",
    "ell",
    "tee",
    "backslash",
    "dots",
    "corner",
    "hourglass",
)

SOURCE_CLASSES = ("hbar", "vbar", "plus", "xcross", "frame", "disk", "ring", "slash")
TARGET_CLASSES = ("block", "triangle", "ell", "tee", "backslash", "hourglass")

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class DomainSpec:
    domain_id: str
    classes: tuple[str, ...] = TARGET_CLASSES
    background: tuple[float, float, float] = (0.15, 0.15, 0.2)
    foreground: tuple[float, float, float] = (0.9, 0.85, 0.3)
    texture: str = "solid"  # solid | stripes | checker | speckle
    gradient: float = 0.0  # strength of a left-to-right background ramp
    noise: float = 0.05
    jitter: int = 2  # max centre offset in pixels
    image_size: int = 16

    def __post_init__(self):
        unknown = [c for c in self.classes if c not in SHAPES]
        if unknown:
            raise ValueError(f"unknown shape classes {unknown}")
        if self.texture not in ("solid", "stripes", "checker", "speckle"):
            raise ValueError(f"unknown texture {self.texture!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DomainSpec":
        d = dict(d)
        for k in ("classes", "background", "foreground"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


# Four styles loosely echoing photo / art / cartoon / sketch.
DEFAULT_DOMAINS = (
    DomainSpec("photo", background=(0.35, 0.45, 0.3), foreground=(0.75, 0.55, 0.4),
               texture="speckle", gradient=0.3, noise=0.08),
    DomainSpec("art", background=(0.5, 0.2, 0.35), foreground=(0.95, 0.8, 0.2),
               texture="stripes", gradient=0.1, noise=0.05),
    DomainSpec("cartoon", background=(0.95, 0.95, 0.6), foreground=(0.1, 0.3, 0.9),
               texture="solid", noise=0.02),
    DomainSpec("sketch", background=(1.0, 1.0, 1.0), foreground=(0.05, 0.05, 0.05),
               texture="checker", noise=0.1),
)

SOURCE_STYLES = (
    DomainSpec("src-a", classes=SOURCE_CLASSES, texture="solid", noise=0.05),
    DomainSpec("src-b", classes=SOURCE_CLASSES, background=(0.8, 0.8, 0.85),
               foreground=(0.2, 0.1, 0.5), texture="stripes", noise=0.05),
    DomainSpec("src-c", classes=SOURCE_CLASSES, background=(0.3, 0.5, 0.3),
               foreground=(0.9, 0.9, 0.9), texture="speckle", gradient=0.3, noise=0.08),
)


# ---------------------------------------------------------------------------
# geometry


@dataclass(frozen=True)
class Geometry:
    cx: float
    cy: float
    size: float  # half-extent in pixels
    width: float  # stroke half-width


def draw_geometry(seed: int, cls_index: int, index: int, jitter: int, image_size: int) -> Geometry:
    rng = np.random.default_rng([seed, cls_index, index, 0xC0FFEE])
    u = rng.uniform(-1.0, 1.0, size=2)
    mid = (image_size - 1) / 2.0
    return Geometry(
        cx=mid + round(u[0] * jitter),
        cy=mid + round(u[1] * jitter),
        size=float(rng.uniform(0.25, 0.38) * image_size),
        width=float(rng.choice([0.8, 1.2])),
    )


def shape_mask(shape: str, g: Geometry, image_size: int) -> np.ndarray:
    """Boolean ``[H, W]`` mask of ``shape`` drawn with geometry ``g``."""
    yy, xx = np.mgrid[0:image_size, 0:image_size].astype(np.float64)
    dx, dy = xx - g.cx, yy - g.cy
    s, w = g.size, g.width
    inside = (np.abs(dx) <= s) & (np.abs(dy) <= s)
    r = np.hypot(dx, dy)
    if shape == "hbar":
        return (np.abs(dy) <= w) & (np.abs(dx) <= s)
    if shape == "vbar":
        return (np.abs(dx) <= w) & (np.abs(dy) <= s)
    if shape == "plus":
        return ((np.abs(dy) <= w) | (np.abs(dx) <= w)) & inside
    if shape == "xcross":
        return ((np.abs(dx - dy) <= 1.2 * w) | (np.abs(dx + dy) <= 1.2 * w)) & inside
    if shape == "frame":
        return inside & ((np.abs(dx) >= s - 2 * w) | (np.abs(dy) >= s - 2 * w))
    if shape == "disk":
        return r <= s
    if shape == "ring":
        return np.abs(r - s + w) <= w
    if shape == "slash":
        return (np.abs(dx + dy) <= 1.2 * w) & inside
    if shape == "backslash":
        return (np.abs(dx - dy) <= 1.2 * w) & inside
    if shape == "block":
        return (np.abs(dx) <= 0.7 * s) & (np.abs(dy) <= 0.7 * s)
    if shape == "triangle":
        # apex up: half-width grows linearly from top to bottom
        t = (dy + s) / (2 * s)
        return inside & (np.abs(dx) <= t * s)
    if shape == "ell":
        return inside & ((dx <= -s + 2 * w) | (dy >= s - 2 * w))
    if shape == "tee":
        return inside & ((dy <= -s + 2 * w) | (np.abs(dx) <= w))
    if shape == "dots":
        c = 0.5 * s
        pts = [(-c, -c), (c, -c), (-c, c), (c, c)]
        return np.any([np.hypot(dx - a, dy - b) <= 1.5 * w for a, b in pts], axis=0)
    if shape == "corner":
        return inside & (dx >= 0) & (dy >= 0) & ((dx <= 2 * w) | (dy <= 2 * w))
    if shape == "hourglass":
        return inside & (np.abs(dx) <= np.abs(dy))
    raise ValueError(f"unknown shape {shape!r}")


def _texture(spec: DomainSpec, rng: np.random.Generator) -> np.ndarray:
    n = spec.image_size
    fg = np.asarray(spec.foreground)[:, None, None] * np.ones((3, n, n))
    yy, xx = np.mgrid[0:n, 0:n]
    if spec.texture == "stripes":
        fg = fg * np.where((yy // 2) % 2 == 0, 1.0, 0.6)
    elif spec.texture == "checker":
        fg = fg * np.where(((yy // 2) + (xx // 2)) % 2 == 0, 1.0, 0.0) + (1 - fg) * np.where(
            ((yy // 2) + (xx // 2)) % 2 == 0, 0.0, 0.25
        )
    elif spec.texture == "speckle":
        fg = fg * rng.uniform(0.7, 1.0, size=(1, n, n))
    return fg


def render(spec: DomainSpec, shape: str, g: Geometry, rng: np.random.Generator) -> np.ndarray:
    n = spec.image_size
    mask = shape_mask(shape, g, n)[None]
    ramp = np.linspace(-0.5, 0.5, n)[None, None, :] * spec.gradient
    bg = np.asarray(spec.background)[:, None, None] + ramp
    img = np.where(mask, _texture(spec, rng), bg)
    img = img + rng.normal(0.0, spec.noise, size=img.shape)
    return np.clip(img, 0.0, 1.0) - 0.5


# ---------------------------------------------------------------------------
# datasets


class AccessLog:
    """Records which (domain, split) slices were read, and for what purpose."""

    def __init__(self) -> None:
        self.entries: list[tuple[str, str, str]] = []
        self.contexts: list[str | None] = []  # e.g. the held-out domain of a DG fold
        self.context: str | None = None

    def record(self, domain: str, split: str, phase: str) -> None:
        self.entries.append((domain, split, phase))
        self.contexts.append(self.context)

    def in_context(self, context: str) -> list[tuple[str, str, str]]:
        return [e for e, c in zip(self.entries, self.contexts) if c == context]

    def for_domain(self, domain: str, phases=None) -> list[tuple[str, str, str]]:
        return [e for e in self.entries if e[0] == domain and (phases is None or e[2] in phases)]


@dataclass
class LabeledDataset:
    images: np.ndarray  # [N, C, H, W]
    labels: np.ndarray  # [N]
    splits: np.ndarray  # [N] of split names
    domain: str
    class_names: tuple[str, ...]
    seed: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.splits = np.asarray(self.splits, dtype="<U5")
        if not (len(self.images) == len(self.labels) == len(self.splits)):
            raise ContractError("images, labels and splits must have equal length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ContractError("label outside [0, num_classes)")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def indices(self, split: str) -> np.ndarray:
        return np.flatnonzero(self.splits == split)

    def count(self, split: str) -> dict[int, int]:
        labels = self.labels[self.indices(split)]
        return {c: int((labels == c).sum()) for c in range(self.num_classes)}

    def take(self, split: str, phase: str = "train", log: AccessLog | None = None):
        """``(images, labels)`` of one split; the read is logged when ``log`` is given."""
        if log is not None:
            log.record(self.domain, split, phase)
        idx = self.indices(split)
        return self.images[idx], self.labels[idx]

    def select(self, keep: np.ndarray) -> "LabeledDataset":
        keep = np.asarray(keep)
        return LabeledDataset(
            self.images[keep], self.labels[keep], self.splits[keep], self.domain,
            self.class_names, self.seed, dict(self.meta),
        )

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.images, dtype="<f8").tobytes())
        h.update(self.labels.astype("<i8").tobytes())
        h.update("|".join(self.splits.tolist()).encode())
        h.update(json.dumps([self.domain, list(self.class_names), self.seed]).encode())
        return h.hexdigest()


def _split_counts(n: int, fractions: tuple[float, float, float]) -> tuple[int, int, int]:
    n_val = int(np.floor(fractions[1] * n + 0.5))
    n_test = int(np.floor(fractions[2] * n + 0.5))
    return n - n_val - n_test, n_val, n_test


def generate_domain(
    spec: DomainSpec,
    n_per_class: int,
    seed: int,
    fractions: tuple[float, float, float] = (0.6, 0.1, 0.3),
) -> LabeledDataset:
    """Render ``n_per_class`` images of every class in ``spec.classes`` with split tags.

    Within each class the first items are train, then val, then test.
    """
    if n_per_class < 1:
        raise ContractError("n_per_class must be >= 1")
    counts = _split_counts(n_per_class, fractions)
    tags = np.repeat(np.array(SPLITS), counts)
    images, labels, splits = [], [], []
    for c, name in enumerate(spec.classes):
        shape_id = SHAPES.index(name)
        for i in range(n_per_class):
            g = draw_geometry(seed, shape_id, i, spec.jitter, spec.image_size)
            style_rng = np.random.default_rng([seed, shape_id, i, _domain_key(spec.domain_id)])
            images.append(render(spec, name, g, style_rng))
            labels.append(c)
            splits.append(tags[i])
    return LabeledDataset(
        np.stack(images), np.array(labels), np.array(splits), spec.domain_id,
        tuple(spec.classes), seed, {"spec": spec.to_dict(), "fractions": list(fractions)},
    )


def _domain_key(domain_id: str) -> int:
    return int.from_bytes(hashlib.sha256(domain_id.encode()).digest()[:4], "little")


def concat_datasets(parts: list[LabeledDataset], domain: str) -> LabeledDataset:
    names = parts[0].class_names
    if any(p.class_names != names for p in parts):
        raise ContractError("datasets must share a class set")
    return LabeledDataset(
        np.concatenate([p.images for p in parts]),
        np.concatenate([p.labels for p in parts]),
        np.concatenate([p.splits for p in parts]),
        domain, names, parts[0].seed, {"parts": [p.domain for p in parts]},
    )


def subsample(ds: LabeledDataset, rate: float, seed: int) -> LabeledDataset:
    """Stratified per-class subsample of the train split; val/test untouched."""
    if not 0.0 < rate <= 1.0:
        raise ContractError(f"sampling rate must lie in (0, 1], got {rate}")
    if rate == 1.0:
        return ds
    rng = np.random.default_rng([seed, 0x5AB])
    keep = ds.splits != "train"
    for c in range(ds.num_classes):
        idx = np.flatnonzero((ds.splits == "train") & (ds.labels == c))
        k = int(np.floor(rate * len(idx) + 0.5))
        if k == 0 and len(idx):
            raise ContractError(f"class {c} would be empty at rate {rate}")
        keep[np.sort(rng.permutation(idx)[:k])] = True
    out = ds.select(keep)
    out.meta["sampling_rate"] = rate
    return out


def export_dataset(ds: LabeledDataset, path) -> Path:
    meta = {
        "labels": ds.labels.tolist(),
        "splits": ds.splits.tolist(),
        "domain": ds.domain,
        "class_names": list(ds.class_names),
        "seed": ds.seed,
        "meta": ds.meta,
        "content_hash": ds.content_hash(),
    }
    return save_arrays(path, {"images": ds.images}, kind="dataset", meta=meta)


def import_dataset(path) -> LabeledDataset:
    arrays, meta = load_arrays(path, kind="dataset")
    return LabeledDataset(
        arrays["images"], np.array(meta["labels"]), np.array(meta["splits"]),
        meta["domain"], tuple(meta["class_names"]), meta["seed"], meta["meta"],
    )


def source_dataset(n_per_class: int, seed: int, styles=SOURCE_STYLES) -> LabeledDataset:
    """Pretraining data: the source classes rendered in several styles, pooled."""
    parts = [generate_domain(s, n_per_class, seed + i, fractions=(0.9, 0.1, 0.0))
             for i, s in enumerate(styles)]
    return concat_datasets(parts, "source")


def pretrain_toy(config, source: LabeledDataset, steps: int, seed: int, optim=None, log: AccessLog | None = None):
    """Train a fresh pure-SA ViT on ``source`` and return it frozen."""
    from .baselines import BaselineKind
    from .optim import OptimConfig
    from .training import fit
    from .vit import ViTModel

    if config.num_classes != source.num_classes:
        raise ContractError(
            f"config has {config.num_classes} classes, source task has {source.num_classes}"
        )
    optim = optim or OptimConfig(lr=2e-3, weight_decay=0.05, warmup_steps=20, total_steps=steps, batch_size=32)
    if optim.total_steps != steps:
        from dataclasses import replace

        optim = replace(optim, total_steps=steps)
    model = ViTModel.init(config, seed)
    images, labels = source.take("train", "pretrain", log)
    fit(BaselineKind.FT, model, None, images, labels, optim, seed)
    return model.freeze()
