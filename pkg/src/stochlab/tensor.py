"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Operations are recorded on the active :class:`Tape` (if any) whenever at
least one input requires a gradient. Outside a ``with Tape():`` block nothing
is recorded, which is how frozen-model forwards stay gradient-free.

Batched operands are allowed: any leading axes are treated as independent
batch dimensions, and a 2-D right operand of :func:`matmul` is shared across
them (the weight-matrix case).
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

DTYPE = np.float64


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(RuntimeError):
    """A caller violated an operation precondition."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.ascontiguousarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node: Record | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def values(self) -> np.ndarray:
        """Flat row-major view of the data."""
        return self.data.reshape(-1)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(self, _as_tensor(other))

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self):
        return mean(self)

    def __getitem__(self, key):
        return index(self, key)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DTYPE))


@dataclass(eq=False)
class Record:
    """One recorded operation: inputs, output and the rule mapping dOut to dInputs."""

    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered operation log; also a context manager that makes itself active."""

    def __init__(self) -> None:
        self.records: list[Record] = []

    def ops(self) -> list[str]:
        return [r.op for r in self.records]

    def __len__(self) -> int:
        return len(self.records)

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()


_local = threading.local()


def _stack() -> list[Tape]:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def active_tape() -> Tape | None:
    stack = _stack()
    return stack[-1] if stack else None


class no_grad:
    """Suspend recording inside the block, even under an outer tape."""

    def __enter__(self):
        _stack().append(None)

    def __exit__(self, *exc):
        _stack().pop()


def _emit(op: str, out: np.ndarray, inputs: tuple[Tensor, ...], rule) -> Tensor:
    if not np.isfinite(out).all():
        raise FloatingPointError(f"{op} produced non-finite values")
    t = Tensor(out)
    tape = active_tape()
    if tape is not None and any(i.requires_grad for i in inputs):
        t.requires_grad = True
        rec = Record(op, inputs, t, rule)
        t.node = rec
        tape.records.append(rec)
    return t


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Leaves that ``loss`` does not depend on keep ``grad is None``.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node is None or not any(r is loss.node for r in tape.records):
        raise ContractError("loss was not recorded on this tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        for inp, gi in zip(rec.inputs, rec.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp.node is None:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                grads[key] = gi if key not in grads else grads[key] + gi


# ---------------------------------------------------------------------------
# elementwise and structural ops


def _suffix_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape:
        return
    if b.ndim <= a.ndim and a.shape[a.ndim - b.ndim :] == b.shape:
        return
    raise DimensionError(f"{op}: cannot combine shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.reshape((-1,) + shape).sum(axis=0) if lead else g


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may be a trailing-suffix bias (e.g. shape ``[d]``)."""
    _suffix_broadcast(a, b, "add")
    return _emit("add", a.data + b.data, (a, b), lambda g: (g, _reduce_to(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _suffix_broadcast(a, b, "sub")
    return _emit("sub", a.data - b.data, (a, b), lambda g: (g, -_reduce_to(g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")
    return _emit("mul", a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    return _emit("scale", a.data * c, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` over the last two axes.

    ``b`` is either 2-D (shared weight) or has the same leading axes as ``a``.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions disagree for {a.shape} @ {b.shape}")
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch axes disagree for {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def rule(g):
        da = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2:
            k, n = b.shape
            db = a.data.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            db = np.swapaxes(a.data, -1, -2) @ g
        return da, db

    return _emit("matmul", out, (a, b), rule)


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit("transpose", np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    src = a.shape
    return _emit("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _emit("concat", out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def index(a: Tensor, key) -> Tensor:
    """Basic (non-fancy) indexing, e.g. ``x[:, 0]`` for the CLS row."""
    out = a.data[key]

    def rule(g):
        full = np.zeros_like(a.data)
        full[key] = g
        return (full,)

    return _emit("index", np.array(out, copy=True), (a,), rule)


def where_batch(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """Per-leading-item hard selection: item i comes from ``a`` if ``mask[i]`` else ``b``."""
    if a.shape != b.shape or mask.shape != (a.shape[0],):
        raise DimensionError(f"where_batch: {mask.shape}, {a.shape}, {b.shape}")
    m = mask.reshape((-1,) + (1,) * (a.ndim - 1)).astype(bool)
    return _emit("where", np.where(m, a.data, b.data), (a, b), lambda g: (g * m, g * ~m))


def tsum(a: Tensor, axis=None) -> Tensor:
    out = a.data.sum(axis=axis)

    def rule(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _emit("sum", np.asarray(out), (a,), rule)


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    return _emit("mean", np.asarray(a.data.mean()), (a,), lambda g: (np.full(a.shape, g / n),))


# ---------------------------------------------------------------------------
# neural-network primitives


def softmax_rows(m: Tensor) -> Tensor:
    """Softmax over the last axis, with row-max subtraction."""
    z = m.data - m.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def rule(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", y, (m,), rule)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: width {d} vs gain {gain.shape}, bias {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def rule(g):
        dxhat = g * gain.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        dgain = (g * xhat).reshape(-1, d).sum(axis=0)
        dbias = g.reshape(-1, d).sum(axis=0)
        return dx, dgain, dbias

    return _emit("layer_norm", out, (x, gain, bias), rule)


_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
    return _emit("gelu", x.data * cdf, (x,), lambda g: (g * (cdf + x.data * pdf),))


def cross_entropy_loss(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of ``-log softmax(logits)[label]``."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs {labels.shape[0]} labels")
    b, c = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise IndexError(f"label out of range [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(b)
    loss = np.mean(lse - z[rows, labels])

    def rule(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1.0
        return (p * (g / b),)

    return _emit("cross_entropy", np.asarray(loss), (logits,), rule)
