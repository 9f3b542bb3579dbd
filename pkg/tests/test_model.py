import dataclasses

import numpy as np
import pytest

from meepo.errors import ConfigError, ParameterError
from meepo.model import (
    ModelConfig, attention_module, block_forward, build_model, drop_path, init_attention, init_block,
    meepo_forward, model_views,
)
from meepo.numerics import ParamStore, Tensor, cross_entropy, grad_check, mul, precision, sum_all
from meepo.pointcloud import SceneSpec, crop_to_voxels, generate_scene, voxelize
from meepo.sparseconv import SparseTensor
from meepo.ssm import SSMConfig

from oracles import generic_steps, param_grad_error, random_sparse

TINY = ModelConfig(
    grid_size=0.25, embedding_depth=1, embedding_channels=8,
    encoder_depths=(1, 1), encoder_channels=(8, 8), encoder_heads=(2, 2),
    decoder_depths=(1, 1), decoder_channels=(8, 8), decoder_heads=(2, 2),
    down_strides=(2, 2), block_types=("cnn_mamba",), channel_multiplier=1.0, mlp_ratio=2,
    drop_path_rate=0.0, ssm=SSMConfig(state_dim=2, expand=1, conv_kernel=3),
)


def block(block_type, C=4, seed=0, zero=False, drop=0.0):
    store = ParamStore()
    cfg = dataclasses.replace(TINY, zero_init_residual=zero)
    with precision(np.float64):
        p = init_block(store, "b", C, block_type, 2, cfg, np.random.default_rng(seed), drop)
    return store, p


@pytest.mark.parametrize("bt", ["cnn_mamba", "cnn_transformer", "cnn_only", "mamba_only", "transformer_only"])
def test_zero_init_block_is_identity(bt):
    _, p = block(bt, zero=True)
    st = random_sparse(np.random.default_rng(1), side=3, cin=4, density=0.5)
    np.testing.assert_array_equal(block_forward(st, p).features.data, st.features.data)


def test_drop_path_contract():
    x = Tensor(np.ones((3, 2)))
    assert drop_path(x, 0.0, True, np.random.default_rng(0)) is x
    assert drop_path(x, 0.9, False) is x
    rng = np.random.default_rng(0)
    outs = [drop_path(x, 0.3, True, rng).data[0, 0] for _ in range(10_000)]
    alive = np.array(outs) != 0
    assert abs(alive.mean() - 0.7) < 0.02
    np.testing.assert_allclose(np.array(outs)[alive], 1 / 0.7)
    with pytest.raises(ParameterError):
        drop_path(x, 1.0, True, rng)


def test_eval_mode_block_deterministic():
    _, p = block("cnn_mamba", drop=0.5)
    st = random_sparse(np.random.default_rng(2), side=3, cin=4, density=0.5)
    a = block_forward(st, p, train_mode=False).features.data
    b = block_forward(st, p, train_mode=False).features.data
    np.testing.assert_array_equal(a, b)


def test_single_voxel_block_gradient():
    _, p = block("cnn_mamba", seed=3)
    coords = np.array([[1, 1, 1]])
    x0 = np.random.default_rng(3).standard_normal((1, 4))
    st = SparseTensor(coords, np.array([7]), x0)
    w = Tensor(np.random.default_rng(4).standard_normal((1, 4)))
    f = lambda x: sum_all(mul(block_forward(st.with_features(x), p).features, w))
    assert np.all(np.isfinite(block_forward(st, p).features.data))
    assert grad_check(f, x0) < 1e-4


def _attention(seed, C=4, heads=2):
    store = ParamStore()
    with precision(np.float64):
        return init_attention(store, "a", C, heads, np.random.default_rng(seed))


def test_attention_single_token_and_uniform():
    p = _attention(0)
    x = np.random.default_rng(0).standard_normal((1, 4))
    v = x @ p.qkv.data[:, 8:] + p.qkv_bias.data[8:]
    np.testing.assert_allclose(attention_module(Tensor(x), p).data, v @ p.out.data + p.out_bias.data, atol=1e-12)
    p.qkv.data[:, :8] = 0
    x = np.random.default_rng(1).standard_normal((5, 4))
    v = x @ p.qkv.data[:, 8:]
    expected = np.tile(v.mean(axis=0), (5, 1)) @ p.out.data
    np.testing.assert_allclose(attention_module(Tensor(x), p).data, expected, atol=1e-12)


def test_attention_permutation_equivariant():
    p = _attention(2)
    x = np.random.default_rng(2).standard_normal((6, 4))
    perm = np.random.default_rng(3).permutation(6)
    a = attention_module(Tensor(x), p).data
    b = attention_module(Tensor(x[perm]), p).data
    np.testing.assert_allclose(b, a[perm], atol=1e-12)


@pytest.mark.parametrize("bt", ["cnn_mamba", "cnn_transformer", "cnn_only", "mamba_only", "transformer_only"])
def test_block_gradients(bt):
    store, p = block(bt, seed=5)
    st = random_sparse(np.random.default_rng(5), side=3, cin=4, density=0.4)
    w = Tensor(np.random.default_rng(6).standard_normal(st.features.shape))
    f = lambda x: sum_all(mul(block_forward(st.with_features(x), p).features, w))
    assert grad_check(f, st.features.data) < 1e-4
    generic_steps(store)
    with precision(np.float64):
        err = param_grad_error(lambda: sum_all(mul(block_forward(st, p).features, w)), store, skip=key_bias)
    assert err < 1e-4


def key_bias(name, i):
    # softmax rows are shift-invariant, so the key bias gradient is identically zero
    return name.endswith("attn.qkv_bias") and 4 <= i < 8


def small_scene(n_voxels=32, seed=0, grid=0.25):
    pc = crop_to_voxels(generate_scene(seed, SceneSpec(num_points=2000)), grid, n_voxels)
    return voxelize(pc, grid)


def test_forward_shapes_and_counts():
    v = voxelize(generate_scene(0, SceneSpec(num_points=1000)), 0.02)
    cfg = ModelConfig()
    out = meepo_forward(v, cfg, build_model(cfg, 0))
    assert out.logits.shape == (len(v), cfg.num_classes)
    assert all(b <= a for a, b in zip(out.stage_counts, out.stage_counts[1:]))
    assert out.point_logits().shape == (1000, cfg.num_classes)


def test_forward_accepts_point_cloud():
    pc = generate_scene(1, SceneSpec(num_points=600))
    store = build_model(TINY, 0)
    a = meepo_forward(pc, TINY, store).logits.data
    b = meepo_forward(voxelize(pc, TINY.grid_size), TINY, store).logits.data
    np.testing.assert_array_equal(a, b)


def test_full_model_gradient():
    v = small_scene()
    assert len(v) <= 32
    with precision(np.float64):
        store = build_model(TINY, 1)
        generic_steps(store)
        err = param_grad_error(lambda: cross_entropy(meepo_forward(v, TINY, store).logits, v.labels), store, h=3e-5, per_tensor=3)
    assert err < 1e-3


def test_views_rebuilt_from_store():
    store = build_model(TINY, 2)
    store.cache.clear()
    views = model_views(TINY, store)
    assert views.head is store["head.weight"]


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(block_types=("cnn_mamba", "nope", "cnn_mamba", "cnn_mamba"))
    with pytest.raises(ConfigError):
        ModelConfig(encoder_depths=(1, 1))
    with pytest.raises(ConfigError):
        ModelConfig(down_strides=(1, 2, 2, 2))
    assert ModelConfig(block_types="cnn_only").block_types == ("cnn_only",) * 4
