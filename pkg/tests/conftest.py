import numpy as np
import pytest

from stochlab.tensor import Tape, Tensor, backward, mul, no_grad, tsum
from stochlab.vit import ViTConfig, ViTModel

TINY = ViTConfig(image_size=12, patch_size=4, channels=3, depth=2, dim=8, heads=2,
                 mlp_ratio=2, num_classes=3, init_std=0.3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    return TINY


@pytest.fixture
def tiny_model():
    return ViTModel.init(TINY, seed=0)


@pytest.fixture
def images(rng):
    return rng.normal(size=(4, 3, 12, 12))


def numeric_grad(f, arrays, step=1e-6):
    """Central differences of scalar ``f()`` w.r.t. every entry of each array (mutated in place)."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            orig = a[idx]
            a[idx] = orig + step
            up = f()
            a[idx] = orig - step
            down = f()
            a[idx] = orig
            g[idx] = (up - down) / (2 * step)
        grads.append(g)
    return grads


def check_op_gradient(op, inputs, rng, step=1e-6, floor=1e-4):
    """Max relative error between tape and finite-difference gradients of ``sum(w * op(*inputs))``."""
    leaves = [Tensor(x, requires_grad=True) for x in inputs]
    with no_grad():
        out_shape = op(*leaves).shape
    w = Tensor(rng.normal(size=out_shape))

    def value():
        with no_grad():
            return float(np.sum(tsum(mul(op(*leaves), w)).data))

    with Tape() as tape:
        loss = tsum(mul(op(*leaves), w))
    backward(tape, loss)
    numeric = numeric_grad(value, [t.data for t in leaves], step)
    worst = 0.0
    for t, n in zip(leaves, numeric):
        a = t.grad if t.grad is not None else np.zeros_like(n)
        rel = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(rel.max()))
    return worst
