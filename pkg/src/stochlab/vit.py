"""A configurable tiny Vision Transformer.

Parameters live in a flat, ordered ``name -> Tensor`` mapping so that
checkpointing, hashing and head replacement are simple dictionary work.
Blocks are pre-norm: ``u = h + attn(norm1(h))``, ``h' = u + mlp(norm2(u))``.
The attention sublayer is injected per layer, which is how the cross-attention
variants reuse the same block skeleton.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, replace
from typing import Callable

import numpy as np

from . import counters
from .attention import AttentionParams, attend, multi_head_attention, project_qkv
from .tensor import (
    DimensionError,
    Tensor,
    add,
    concat,
    gelu,
    index,
    layer_norm,
    matmul,
    reshape,
)


class ConfigError(ValueError):
    """Inconsistent model or run configuration."""


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 16
    patch_size: int = 4
    channels: int = 3
    depth: int = 2
    dim: int = 16
    heads: int = 2
    mlp_ratio: int = 2
    num_classes: int = 4
    init_std: float = 0.02
    ln_eps: float = 1e-6

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ConfigError("image_size must be a multiple of patch_size")
        if self.dim % self.heads:
            raise ConfigError("dim must be divisible by heads")
        if self.depth < 1 or self.num_classes < 1 or self.mlp_ratio < 1:
            raise ConfigError("depth, num_classes and mlp_ratio must be positive")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.grid**2 + 1

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size**2

    def to_dict(self) -> dict:
        return asdict(self)

    def same_architecture(self, other: "ViTConfig") -> bool:
        mine, theirs = asdict(self), asdict(other)
        mine.pop("num_classes")
        theirs.pop("num_classes")
        return mine == theirs


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def _param_shapes(cfg: ViTConfig) -> list[tuple[str, tuple[int, ...]]]:
    d, hidden = cfg.dim, cfg.dim * cfg.mlp_ratio
    shapes = [
        ("patch.weight", (cfg.patch_dim, d)),
        ("patch.bias", (d,)),
        ("cls", (d,)),
        ("pos", (cfg.num_tokens, d)),
    ]
    for l in range(cfg.depth):
        p = f"blocks.{l}."
        shapes += [
            (p + "norm1.gain", (d,)),
            (p + "norm1.bias", (d,)),
            (p + "attn.w_q", (d, d)),
            (p + "attn.w_k", (d, d)),
            (p + "attn.w_v", (d, d)),
            (p + "attn.w_o", (d, d)),
            (p + "norm2.gain", (d,)),
            (p + "norm2.bias", (d,)),
            (p + "mlp.fc1.weight", (d, hidden)),
            (p + "mlp.fc1.bias", (hidden,)),
            (p + "mlp.fc2.weight", (hidden, d)),
            (p + "mlp.fc2.bias", (d,)),
        ]
    shapes += [
        ("norm.gain", (d,)),
        ("norm.bias", (d,)),
        ("head.weight", (d, cfg.num_classes)),
        ("head.bias", (cfg.num_classes,)),
    ]
    return shapes


def _init_value(name: str, shape, cfg: ViTConfig, rng: np.random.Generator) -> np.ndarray:
    if name.endswith(".gain"):
        return np.ones(shape)
    if name.endswith("bias"):
        return np.zeros(shape)
    return _trunc_normal(rng, shape, cfg.init_std)


HEAD_PARAMS = ("head.weight", "head.bias")


@dataclass
class Block:
    norm1: tuple[Tensor, Tensor]
    attn: AttentionParams
    norm2: tuple[Tensor, Tensor]
    fc1: tuple[Tensor, Tensor]
    fc2: tuple[Tensor, Tensor]
    eps: float


class ViTModel:
    """Patch embedding + CLS/positional embeddings, ``depth`` blocks, classifier head."""

    def __init__(self, config: ViTConfig, params: dict[str, Tensor]):
        expected = _param_shapes(config)
        if [n for n, _ in expected] != list(params):
            raise ConfigError("parameter names do not match the configuration")
        for name, shape in expected:
            if params[name].shape != shape:
                raise ConfigError(f"{name}: expected shape {shape}, got {params[name].shape}")
        self.config = config
        self.params = params
        self.frozen = False

    @classmethod
    def init(cls, config: ViTConfig, seed: int) -> "ViTModel":
        rng = np.random.default_rng(seed)
        params = {
            name: Tensor(_init_value(name, shape, config, rng), requires_grad=True, name=name)
            for name, shape in _param_shapes(config)
        }
        return cls(config, params)

    def __repr__(self) -> str:
        return f"ViTModel({self.config}, frozen={self.frozen})"

    def block(self, l: int) -> Block:
        p, P = f"blocks.{l}.", self.params
        return Block(
            norm1=(P[p + "norm1.gain"], P[p + "norm1.bias"]),
            attn=AttentionParams(
                P[p + "attn.w_q"], P[p + "attn.w_k"], P[p + "attn.w_v"], P[p + "attn.w_o"],
                heads=self.config.heads,
            ),
            norm2=(P[p + "norm2.gain"], P[p + "norm2.bias"]),
            fc1=(P[p + "mlp.fc1.weight"], P[p + "mlp.fc1.bias"]),
            fc2=(P[p + "mlp.fc2.weight"], P[p + "mlp.fc2.bias"]),
            eps=self.config.ln_eps,
        )

    def copy(self) -> "ViTModel":
        """Deep copy; the copy is trainable regardless of ``self.frozen``."""
        params = {
            n: Tensor(t.data.copy(), requires_grad=True, name=n) for n, t in self.params.items()
        }
        return ViTModel(self.config, params)

    def freeze(self) -> "ViTModel":
        for t in self.params.values():
            t.requires_grad = False
            t.grad = None
            t.data.setflags(write=False)
        self.frozen = True
        return self

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def param_hash(self, exclude: tuple[str, ...] = ()) -> str:
        h = hashlib.sha256()
        for name, t in self.params.items():
            if name in exclude:
                continue
            h.update(name.encode())
            h.update(repr(t.shape).encode())
            h.update(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# forward pieces

AttnFn = Callable[[Tensor], Tensor]
LayerAttn = Callable[[int, Tensor, AttentionParams], Tensor]


def as_batch(images) -> np.ndarray:
    x = np.asarray(images, dtype=np.float64)
    return x[None] if x.ndim == 3 else x


def extract_patches(images, patch_size: int) -> np.ndarray:
    """``[b, C, H, W] -> [b, (H/p)(W/p), C*p*p]``, patches in row-major grid order."""
    x = as_batch(images)
    b, c, hgt, wid = x.shape
    p = patch_size
    x = x.reshape(b, c, hgt // p, p, wid // p, p).transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(b, (hgt // p) * (wid // p), c * p * p)


def patch_embed(images, model: ViTModel) -> Tensor:
    cfg = model.config
    x = as_batch(images)
    if x.shape[1:] != (cfg.channels, cfg.image_size, cfg.image_size):
        raise DimensionError(
            f"image shape {x.shape[1:]} does not match "
            f"{(cfg.channels, cfg.image_size, cfg.image_size)}"
        )
    P = model.params
    tokens = add(matmul(Tensor(extract_patches(x, cfg.patch_size)), P["patch.weight"]), P["patch.bias"])
    cls = reshape(P["cls"], (1, 1, cfg.dim))
    cls = concat([cls] * x.shape[0], axis=0) if x.shape[0] > 1 else cls
    return add(concat([cls, tokens], axis=1), P["pos"])


def mlp(x: Tensor, block: Block) -> Tensor:
    hidden = gelu(add(matmul(x, block.fc1[0]), block.fc1[1]))
    return add(matmul(hidden, block.fc2[0]), block.fc2[1])


def block_forward(h_in: Tensor, block: Block, attn_output_fn: AttnFn | None = None) -> Tensor:
    """One pre-norm block; ``attn_output_fn`` maps normalized tokens to the attention output."""
    if h_in.shape[-1] != block.attn.dim:
        raise DimensionError(f"block input width {h_in.shape[-1]} != {block.attn.dim}")
    if attn_output_fn is None:
        attn_output_fn = lambda x: multi_head_attention(x, block.attn)  # noqa: E731
    u = add(h_in, attn_output_fn(layer_norm(h_in, *block.norm1, eps=block.eps)))
    return add(u, mlp(layer_norm(u, *block.norm2, eps=block.eps), block))


def self_attention_layer(l: int, x: Tensor, params: AttentionParams) -> Tensor:
    return multi_head_attention(x, params)


def qkv_recorder(store: list, inner: LayerAttn | None = None) -> LayerAttn:
    """Layer hook that appends ``(q, k, v)`` of every self-attention layer to ``store``.

    ``inner``, when given, computes the actual sublayer output instead of plain SA
    (the recorded q/k/v are still the layer's own projections).
    """

    def layer(l: int, x: Tensor, params: AttentionParams) -> Tensor:
        q, k, v = project_qkv(x, params)
        store.append((q, k, v))
        if inner is not None:
            return inner(l, x, params)
        return attend(q, k, v, params)

    return layer


def encode(
    images, model: ViTModel, layer_attn: LayerAttn | None = None, role: str = "target"
) -> Tensor:
    """Token states after the last block (before the final norm)."""
    layer_attn = layer_attn or self_attention_layer
    h = patch_embed(images, model)
    b = h.shape[0]
    for l in range(model.config.depth):
        blk = model.block(l)
        counters.record(f"{role}_attention", b)
        h = block_forward(h, blk, lambda x, l=l, blk=blk: layer_attn(l, x, blk.attn))
    return h


def cls_features(tokens: Tensor, model: ViTModel) -> Tensor:
    P = model.params
    normed = layer_norm(tokens, P["norm.gain"], P["norm.bias"], eps=model.config.ln_eps)
    return index(normed, (slice(None), 0))


def head(features: Tensor, model: ViTModel) -> Tensor:
    return add(matmul(features, model.params["head.weight"]), model.params["head.bias"])


def features(images, model: ViTModel, layer_attn: LayerAttn | None = None) -> Tensor:
    """Pre-head CLS representation ``[b, d]``."""
    return cls_features(encode(images, model, layer_attn), model)


def forward(images, model: ViTModel, layer_attn: LayerAttn | None = None) -> Tensor:
    """Logits ``[b, c]``; pure self-attention unless ``layer_attn`` says otherwise."""
    counters.record(counters.IMAGES, as_batch(images).shape[0])
    return head(features(images, model, layer_attn), model)


def replace_classifier(model: ViTModel, new_c: int, seed: int) -> ViTModel:
    """Copy of ``model`` with a freshly initialized ``d -> new_c`` head."""
    if new_c < 1:
        raise ConfigError("new_c must be >= 1")
    cfg = replace(model.config, num_classes=new_c)
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, shape in _param_shapes(cfg):
        if name in HEAD_PARAMS:
            value = _init_value(name, shape, cfg, rng)
        else:
            value = model.params[name].data.copy()
        params[name] = Tensor(value, requires_grad=True, name=name)
    return ViTModel(cfg, params)


def predict(images, model: ViTModel) -> np.ndarray:
    return forward(images, model).data.argmax(axis=1)
