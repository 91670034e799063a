import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stochlab.attention import (
    AttentionParams,
    attention_weights,
    multi_head_attention,
    scaled_dot_attention,
    split_heads,
    merge_heads,
)
from stochlab.tensor import DimensionError, Tensor


def loop_attention(q, k, v):
    """Score, softmax and mix one query row at a time."""
    n_q, d_h = q.shape
    n_k = k.shape[0]
    out = np.zeros((n_q, v.shape[1]))
    for i in range(n_q):
        scores = [sum(q[i, t] * k[j, t] for t in range(d_h)) / math.sqrt(d_h) for j in range(n_k)]
        top = max(scores)
        w = [math.exp(s - top) for s in scores]
        z = sum(w)
        for j in range(n_k):
            out[i] += (w[j] / z) * v[j]
    return out


def loop_mha(x, params, kv=None):
    """Multi-head attention with explicit per-head column slices."""
    wq, wk, wv, wo = (p.data for p in (params.w_q, params.w_k, params.w_v, params.w_o))
    q = x @ wq
    k, v = (x @ wk, x @ wv) if kv is None else kv
    dh = params.head_dim
    heads = [loop_attention(q[:, h * dh:(h + 1) * dh], k[:, h * dh:(h + 1) * dh], v[:, h * dh:(h + 1) * dh])
             for h in range(params.heads)]
    return np.concatenate(heads, axis=1) @ wo


def random_params(rng, d, h):
    return AttentionParams(*(Tensor(rng.normal(size=(d, d)) / math.sqrt(d)) for _ in range(4)), heads=h)


def test_uniform_keys_average_values():
    q = Tensor([[1.0, 0.0]])
    k = Tensor([[0.0, 0.0], [0.0, 0.0]])
    v = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert scaled_dot_attention(q, k, v).data.tolist() == [[2.0, 3.0]]


def test_kernel_matches_loop_oracle_sa_and_ca(rng):
    worst = 0.0
    cases = 0
    for _ in range(60):
        n, m = rng.integers(1, 9, size=2)
        dh = int(rng.integers(1, 17))
        x = rng.normal(size=(n, dh))
        # self-attention: one sequence supplies q, k and v
        worst = max(worst, np.abs(scaled_dot_attention(Tensor(x), Tensor(x), Tensor(x)).data
                                  - loop_attention(x, x, x)).max())
        # cross-attention: keys/values from a different sequence
        kv = rng.normal(size=(m, dh))
        v = rng.normal(size=(m, dh))
        worst = max(worst, np.abs(scaled_dot_attention(Tensor(x), Tensor(kv), Tensor(v)).data
                                  - loop_attention(x, kv, v)).max())
        cases += 2
    assert cases >= 100
    assert worst <= 1e-12


@pytest.mark.parametrize("h", [1, 2, 4])
def test_multi_head_matches_manual_split(rng, h):
    for _ in range(10):
        n = int(rng.integers(1, 9))
        d = h * int(rng.integers(1, 5))
        params = random_params(rng, d, h)
        x = rng.normal(size=(n, d))
        np.testing.assert_allclose(multi_head_attention(Tensor(x), params).data, loop_mha(x, params), atol=1e-12)
        kv = (rng.normal(size=(n, d)), rng.normal(size=(n, d)))
        np.testing.assert_allclose(multi_head_attention(Tensor(x), params, kv).data,
                                   loop_mha(x, params, kv), atol=1e-12)


def test_batched_equals_per_item(rng):
    params = random_params(rng, 8, 2)
    x = rng.normal(size=(3, 5, 8))
    batched = multi_head_attention(Tensor(x), params).data
    for i in range(3):
        np.testing.assert_allclose(batched[i], multi_head_attention(Tensor(x[i]), params).data, atol=1e-13)


def test_ca_equals_sa_when_kv_come_from_same_weights(rng):
    params = random_params(rng, 8, 2)
    x = rng.normal(size=(2, 5, 8))
    kv = (x @ params.w_k.data, x @ params.w_v.data)
    sa = multi_head_attention(Tensor(x), params).data
    ca = multi_head_attention(Tensor(x), params, kv).data
    assert np.array_equal(sa, ca)


def test_split_merge_round_trip(rng):
    x = rng.normal(size=(2, 5, 12))
    t = split_heads(Tensor(x), 3)
    assert t.shape == (2, 3, 5, 4)
    np.testing.assert_array_equal(t.data[:, 1], x[:, :, 4:8])
    np.testing.assert_array_equal(merge_heads(t).data, x)


def test_heads_must_divide_width(rng):
    with pytest.raises(DimensionError):
        random_params(rng, 6, 4)


def test_kv_shape_mismatch(rng):
    params = random_params(rng, 8, 2)
    with pytest.raises(DimensionError):
        multi_head_attention(Tensor(rng.normal(size=(5, 8))), params,
                             (rng.normal(size=(4, 8)), rng.normal(size=(4, 8))))


def test_width_mismatch(rng):
    params = random_params(rng, 8, 2)
    with pytest.raises(DimensionError):
        multi_head_attention(Tensor(rng.normal(size=(5, 6))), params)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 8), st.integers(1, 16))
def test_output_is_convex_combination_of_values(seed, n, dh):
    r = np.random.default_rng(seed)
    q, k, v = (r.normal(size=(n, dh)) * 3 for _ in range(3))
    w = attention_weights(Tensor(q), Tensor(k)).data
    np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-12)
    assert np.all(w >= 0)
    out = scaled_dot_attention(Tensor(q), Tensor(k), Tensor(v)).data
    assert np.all(out <= v.max(0) + 1e-12) and np.all(out >= v.min(0) - 1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 8))
def test_permutation_equivariance(seed, n):
    r = np.random.default_rng(seed)
    params = random_params(r, 8, 2)
    x = r.normal(size=(n, 8))
    perm = r.permutation(n)
    out = multi_head_attention(Tensor(x), params).data
    np.testing.assert_allclose(multi_head_attention(Tensor(x[perm]), params).data, out[perm], atol=1e-12)
