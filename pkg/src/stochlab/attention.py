"""Self- and cross-attention kernels.

Cross-attention differs from self-attention only in where keys and values
come from: queries are always projected from the caller's tokens, while an
external ``kv_source`` (keys/values already projected by another model) may
replace the locally projected ones.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import (
    DimensionError,
    Tensor,
    matmul,
    reshape,
    scale,
    softmax_rows,
    swap_last,
    transpose,
)


@dataclass
class AttentionParams:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    heads: int = 1

    def __post_init__(self):
        d = self.w_q.shape[0]
        for name in ("w_q", "w_k", "w_v", "w_o"):
            if getattr(self, name).shape != (d, d):
                raise DimensionError(f"{name} must be {d}x{d}, got {getattr(self, name).shape}")
        if self.heads < 1 or d % self.heads:
            raise DimensionError(f"width {d} not divisible by {self.heads} heads")

    @property
    def dim(self) -> int:
        return self.w_q.shape[0]

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads


def _check_width(x: Tensor, d: int) -> None:
    if x.shape[-1] != d:
        raise DimensionError(f"input width {x.shape[-1]} does not match projection width {d}")


def project_qkv(x: Tensor, params: AttentionParams) -> tuple[Tensor, Tensor, Tensor]:
    _check_width(x, params.dim)
    return matmul(x, params.w_q), matmul(x, params.w_k), matmul(x, params.w_v)


def attention_weights(q: Tensor, k: Tensor) -> Tensor:
    """Row-stochastic weights ``softmax(q k^T / sqrt(d_h))``."""
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"query width {q.shape[-1]} != key width {k.shape[-1]}")
    return softmax_rows(scale(matmul(q, swap_last(k)), 1.0 / math.sqrt(q.shape[-1])))


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"keys have {k.shape[-2]} rows but values have {v.shape[-2]}")
    return matmul(attention_weights(q, k), v)


def split_heads(x: Tensor, heads: int) -> Tensor:
    """``[..., n, d] -> [..., heads, n, d/heads]``."""
    *lead, n, d = x.shape
    x = reshape(x, (*lead, n, heads, d // heads))
    k = len(lead)
    axes = list(range(k)) + [k + 1, k, k + 2]
    return transpose(x, axes)


def merge_heads(x: Tensor) -> Tensor:
    """Inverse of :func:`split_heads`."""
    *lead, h, n, dh = x.shape
    k = len(lead)
    axes = list(range(k)) + [k + 1, k, k + 2]
    return reshape(transpose(x, axes), (*lead, n, h * dh))


def attend(q: Tensor, k: Tensor, v: Tensor, params: AttentionParams) -> Tensor:
    """Head-split attention of already projected q/k/v, then the output projection."""
    h = params.heads
    out = scaled_dot_attention(split_heads(q, h), split_heads(k, h), split_heads(v, h))
    return matmul(merge_heads(out), params.w_o)


def multi_head_attention(
    x: Tensor,
    params: AttentionParams,
    kv_source: tuple[Tensor | np.ndarray, Tensor | np.ndarray] | None = None,
) -> Tensor:
    """SA over ``x``, or CA to ``kv_source`` when given.

    ``kv_source`` holds keys and values projected by another model for the
    same token count; they are split with the same head partition as the
    queries.
    """
    _check_width(x, params.dim)
    if kv_source is None:
        q, k, v = project_qkv(x, params)
    else:
        k, v = (t if isinstance(t, Tensor) else Tensor(t) for t in kv_source)
        if k.shape != x.shape or v.shape != x.shape:
            raise DimensionError(
                f"kv_source shapes {k.shape}/{v.shape} do not match tokens {x.shape}"
            )
        q = matmul(x, params.w_q)
    return attend(q, k, v, params)
