import numpy as np
import pytest

from stochlab import counters
from stochlab.analysis import grad_check, op_counter
from stochlab.attention import multi_head_attention
from stochlab.optim import AdamW, OptimConfig
from stochlab.stochca import (
    FrozenModelError,
    GateSchedule,
    draw_gates,
    extract_kv,
    infer,
    stochca_forward,
    train_step,
)
from stochlab.tensor import ContractError, Tensor, layer_norm
from stochlab.vit import ConfigError, ViTConfig, ViTModel, block_forward, cls_features, head, patch_embed, replace_classifier


@pytest.fixture
def pair(tiny_model):
    frozen = tiny_model.copy().freeze()
    target = replace_classifier(frozen, 3, seed=5)
    return target, frozen


def test_extract_kv_replay(pair, images):
    target, frozen = pair
    cache = extract_kv(frozen, images)
    h = patch_embed(images, frozen)
    for l in range(frozen.config.depth):
        blk = frozen.block(l)
        x = layer_norm(h, *blk.norm1, eps=blk.eps).data
        np.testing.assert_allclose(cache.keys[l], x @ blk.attn.w_k.data, atol=1e-13)
        np.testing.assert_allclose(cache.values[l], x @ blk.attn.w_v.data, atol=1e-13)
        h = block_forward(h, blk)
    assert not any(isinstance(k, Tensor) for k in cache.keys)


def test_single_ca_gate_splice(pair, images, rng):
    target, frozen = pair
    for t in target.params.values():
        t.data += rng.normal(scale=0.05, size=t.shape)  # so CA and SA differ
    cache = extract_kv(frozen, images)
    h = patch_embed(images, target)
    b0, b1 = target.block(0), target.block(1)
    h = block_forward(h, b0, lambda x: multi_head_attention(x, b0.attn, cache.layer(0)))
    h = block_forward(h, b1)
    expected = head(cls_features(h, target), target).data
    got = stochca_forward(target, cache, [True, False], images).data
    np.testing.assert_allclose(got, expected, atol=1e-13)
    assert not np.allclose(got, stochca_forward(target, cache, [False, False], images).data)


def test_all_ca_equals_all_sa_when_target_is_frozen_copy(tiny_model, images):
    frozen = tiny_model.copy().freeze()
    target = tiny_model.copy()
    cache = extract_kv(frozen, images)
    ca = stochca_forward(target, cache, [True, True], images).data
    sa = stochca_forward(target, None, [False, False], images).data
    assert np.array_equal(ca, sa)


def test_per_sample_gates_select_rows(pair, images, rng):
    target, frozen = pair
    for t in target.params.values():
        t.data += rng.normal(scale=0.05, size=t.shape)
    cache = extract_kv(frozen, images)
    gates = np.array([[True, False], [False, False], [True, True], [False, True]])
    mixed = stochca_forward(target, cache, gates, images).data
    for i, g in enumerate(gates):
        row = stochca_forward(target, cache, g, images).data[i]
        np.testing.assert_allclose(mixed[i], row, atol=1e-13)


def test_mixed_gate_gradient_check(pair, images):
    target, frozen = pair
    cache = extract_kv(frozen, images[:2])
    for gates in ([True, False], [False, True], [True, True]):
        res = grad_check(target, images[:2], [0, 1], n_params=80, gates=gates, cache=cache)
        assert res.max_rel_error <= 1e-5
    assert all(t.grad is None for t in frozen.params.values())


def test_gate_missing_cache(pair, images):
    target, _ = pair
    with pytest.raises(ContractError):
        stochca_forward(target, None, [True, False], images)


def test_gate_count_mismatch(pair, images):
    target, frozen = pair
    with pytest.raises(ContractError):
        stochca_forward(target, extract_kv(frozen, images), [True], images)


def test_draw_gates_range():
    rng = np.random.default_rng(0)
    assert not draw_gates(0.0, 1000, rng).any()
    assert draw_gates(1.0, 1000, rng).all()
    assert draw_gates(0.5, 3, rng, batch=4).shape == (4, 3)
    with pytest.raises(ContractError):
        draw_gates(1.5, 3, rng)


@pytest.mark.parametrize("p", [0.1, 0.3, 0.5, 0.7])
def test_gate_frequency_band(p):
    sched = GateSchedule(p, seed=11, depth=10)
    for _ in range(1000):
        sched.next(8)
    sigma = np.sqrt(p * (1 - p) / 10_000)
    assert abs(sched.ca_frequency() - p) <= 3 * sigma


def test_gate_layers_independent():
    rng = np.random.default_rng(2)
    g = draw_gates(0.5, 2, rng, batch=20_000).astype(float)
    assert abs(np.corrcoef(g[:, 0], g[:, 1])[0, 1]) < 0.03


def test_incompatible_architecture(images):
    frozen = ViTModel.init(ViTConfig(image_size=12, dim=8, heads=2, depth=2), 0).freeze()
    other = ViTModel.init(ViTConfig(image_size=12, dim=8, heads=2, depth=3), 0)
    with pytest.raises(ConfigError):
        extract_kv(frozen, images, other)


def _opt():
    return AdamW(OptimConfig(lr=1e-2, warmup_steps=0, total_steps=20))


def test_train_step_leaves_frozen_untouched(pair, images):
    target, frozen = pair
    before = frozen.param_hash()
    head_before = target.params["head.weight"].data.copy()
    rng = np.random.default_rng(0)
    for _ in range(3):
        loss = train_step(target, frozen, (images, np.array([0, 1, 2, 0])), 0.5, _opt(), rng)
        assert np.isfinite(loss)
    assert frozen.param_hash() == before
    assert not np.array_equal(target.params["head.weight"].data, head_before)


def test_frozen_with_gradient_is_detected(pair, images):
    target, frozen = pair
    frozen.params["cls"].grad = np.zeros_like(frozen.params["cls"].data)
    with pytest.raises(FrozenModelError):
        train_step(target, frozen, (images, np.array([0, 1, 2, 0])), 0.5, _opt(), np.random.default_rng(0))


def test_p_zero_skips_frozen(pair, images):
    target, frozen = pair
    c = op_counter(lambda: train_step(target, frozen, (images, np.array([0, 1, 2, 0])), 0.0, _opt(),
                                      np.random.default_rng(0)))
    assert c[counters.FROZEN_FORWARD] == 0


def test_inference_never_touches_frozen(pair, images):
    target, _ = pair
    c = op_counter(lambda: infer(target, images))
    assert c[counters.FROZEN_FORWARD] == 0 and c[counters.FROZEN_ATTENTION] == 0
    assert c[counters.TARGET_ATTENTION] == 4 * target.config.depth
