import dataclasses
import math

import numpy as np
import pytest

from meepo.errors import FormatError, NumericError, ParameterError
from meepo.model import ModelConfig
from meepo.numerics import ParamStore
from meepo.pointcloud import SceneSpec
from meepo.ssm import SSMConfig
from meepo.train import (
    AblationRow, AblationTable, DatasetSpec, TrainConfig, TrainingAborted, ablation_suite, adamw_step,
    apply_axis, cosine_lr, decode_checkpoint, encode_checkpoint, miou, restore_model, save_checkpoint,
    successor_task, train_loop,
)

SMALL = ModelConfig(
    grid_size=0.25, embedding_depth=1, embedding_channels=8,
    encoder_depths=(1, 1), encoder_channels=(8, 16), encoder_heads=(2, 2),
    decoder_depths=(1, 1), decoder_channels=(8, 8), decoder_heads=(2, 2),
    down_strides=(2, 2), channel_multiplier=1.0, mlp_ratio=2, drop_path_rate=0.1,
    ssm=SSMConfig(state_dim=4, expand=1),
)
TINY_DATA = DatasetSpec(scene=SceneSpec(num_points=800, object_count=(1, 2)), grid_size=0.25, num_train=2, num_val=1)


def one_param(value, grad):
    store = ParamStore()
    t = store.add("w", np.array([value], dtype=np.float64))
    t.grad = np.array([grad], dtype=np.float64)
    return store, t


def test_adamw_examples():
    store, t = one_param(0.0, 1.0)
    adamw_step(store, TrainConfig(weight_decay=0.0), 0.1)
    assert t.data[0] == pytest.approx(-0.1, abs=1e-8)
    assert t.grad is None

    store, t = one_param(0.7, 0.0)
    adamw_step(store, TrainConfig(weight_decay=0.0), 0.1)
    assert t.data[0] == 0.7

    store, t = one_param(1.0, 0.0)
    adamw_step(store, TrainConfig(weight_decay=0.1), 0.1)
    assert t.data[0] == pytest.approx(0.99, abs=1e-15)


def test_adamw_constant_gradient_step_size():
    store, t = one_param(0.0, -2.0)
    cfg = TrainConfig(weight_decay=0.0)
    prev = 0.0
    for _ in range(100):
        t.grad = np.array([-2.0])
        adamw_step(store, cfg, 0.01)
        step = t.data[0] - prev
        prev = t.data[0]
        assert step > 0
    assert step == pytest.approx(0.01, rel=1e-6)


def test_adamw_block_scaler_and_nan():
    store = ParamStore()
    a = store.add("enc.0.block.0.w", np.zeros(1))
    b = store.add("head.weight", np.zeros(1))
    a.grad, b.grad = np.ones(1), np.ones(1)
    adamw_step(store, TrainConfig(weight_decay=0.0, block_lr_scaler=0.1), 1.0)
    assert a.data[0] == pytest.approx(-0.1, abs=1e-7) and b.data[0] == pytest.approx(-1.0, abs=1e-7)
    b.grad = np.array([np.nan])
    with pytest.raises(NumericError, match="head.weight"):
        adamw_step(store, TrainConfig(), 1.0)


def test_cosine_schedule():
    cfg = TrainConfig(learning_rate=1.0, steps=110, warmup_fraction=10 / 110)
    assert cosine_lr(0, cfg) == 0.0
    assert cosine_lr(5, cfg) == pytest.approx(0.5)
    assert cosine_lr(10, cfg) == pytest.approx(1.0)
    assert cosine_lr(60, cfg) == pytest.approx(0.5)
    assert cosine_lr(110, cfg) == pytest.approx(0.0, abs=1e-15)
    assert all(cosine_lr(s, cfg) >= 0 for s in range(200))


def test_train_config_invariants():
    with pytest.raises(ParameterError):
        TrainConfig(learning_rate=-1)
    with pytest.raises(ParameterError):
        TrainConfig(weight_decay=-0.1)
    with pytest.raises(ParameterError):
        TrainConfig(warmup_fraction=1.5)


def test_miou_examples():
    assert miou([0, 1, 2], [0, 1, 2], 3).miou == 1.0
    rep = miou([0, 0, 1, 1], [0, 1, 1, 1], 2)
    np.testing.assert_allclose(rep.per_class_iou, [0.5, 2 / 3])
    assert rep.miou == pytest.approx(0.5833333333333334)
    rep = miou([0, 1], [-1, -1], 2)
    assert not rep.evaluable and "no evaluable voxels" in rep.summary()


def test_miou_skips_absent_classes_and_is_order_invariant():
    rep = miou([0, 0, 2], [0, 0, 0], 4)
    assert np.isnan(rep.per_class_iou[1]) and np.isnan(rep.per_class_iou[3])
    assert rep.miou == pytest.approx((2 / 3 + 0.0) / 2)
    rng = np.random.default_rng(0)
    pred, true = rng.integers(0, 5, 200), rng.integers(-1, 5, 200)
    perm = rng.permutation(200)
    assert miou(pred, true, 5).miou == miou(pred[perm], true[perm], 5).miou


def test_checkpoint_roundtrip_and_errors():
    arrays = {"a": np.arange(6, dtype=np.float32).reshape(2, 3), "b.c": np.array(2.5, dtype=np.float32)}
    blob = encode_checkpoint(arrays, "x = 1\n")
    text, back = decode_checkpoint(blob)
    assert text == "x = 1\n"
    np.testing.assert_array_equal(back["a"], arrays["a"])
    assert back["b.c"].shape == ()
    with pytest.raises(FormatError, match="magic"):
        decode_checkpoint(b"NOPE" + blob[4:])
    with pytest.raises(FormatError, match="truncated"):
        decode_checkpoint(blob[:-3])
    with pytest.raises(FormatError, match="trailing"):
        decode_checkpoint(blob + b"\0")


def test_train_determinism_and_restore(tmp_path):
    cfg = TrainConfig(steps=3, eval_every=3, batch_size=2)
    a = train_loop(SMALL, cfg, TINY_DATA, checkpoint_path=tmp_path / "m.mpk")
    b = train_loop(SMALL, cfg, TINY_DATA)
    assert a.losses == b.losses
    assert [r.miou for r in a.reports] == [r.miou for r in b.reports]
    mcfg, tcfg, store = restore_model(tmp_path / "m.mpk")
    assert mcfg == SMALL and tcfg == cfg
    for name, t in a.store.items():
        np.testing.assert_array_equal(store[name].data, t.data)


def test_zero_learning_rate_keeps_loss():
    res = train_loop(dataclasses.replace(SMALL, drop_path_rate=0.0),
                     TrainConfig(learning_rate=0.0, steps=3, batch_size=2, eval_every=0), TINY_DATA)
    assert res.losses[0] == res.losses[1] == res.losses[2]


def test_nan_loss_aborts_with_last_good(tmp_path, monkeypatch):
    import meepo.train as train_mod

    real = train_mod.cross_entropy
    calls = {"n": 0}

    def flaky(logits, labels, ignore):
        calls["n"] += 1
        out = real(logits, labels, ignore)
        if calls["n"] > 2:
            out.data = np.asarray(np.nan, dtype=out.data.dtype)
        return out

    monkeypatch.setattr(train_mod, "cross_entropy", flaky)
    path = tmp_path / "last.mpk"
    with pytest.raises(TrainingAborted) as info:
        train_loop(SMALL, TrainConfig(steps=5, batch_size=1, eval_every=1), TINY_DATA, checkpoint_path=path)
    # each step makes one training call and one validation call
    assert info.value.step == 1
    text, arrays = decode_checkpoint(path.read_bytes())
    assert "train.steps = 5" in text and arrays


def test_successor_task_labels():
    from meepo.pointcloud import generate_scene, voxelize

    v = voxelize(generate_scene(0, SceneSpec(num_points=500)), 0.25)
    feats, labels = successor_task(v, 0)
    code = (feats[:, 0] > 0).astype(int)
    np.testing.assert_array_equal(labels[:-1], code[1:])
    assert labels[-1] == -1


def test_apply_axis():
    assert apply_axis(SMALL, "block_type", "cnn_only").block_types == ("cnn_only", "cnn_only")
    assert apply_axis(SMALL, "directions", "standard").ssm.directions == ("forward",)
    assert apply_axis(SMALL, "stride", 8).ssm.stride == 8
    assert apply_axis(SMALL, "conv_mode", "causal").ssm.conv_mode == "causal"
    with pytest.raises(ParameterError):
        apply_axis(SMALL, "depth", 2)


def test_single_config_ablation_equals_train_loop():
    tcfg = TrainConfig(steps=2, eval_every=2, batch_size=1)
    table = ablation_suite("stride", [2], [0], SMALL, tcfg, TINY_DATA)
    plain = train_loop(SMALL, tcfg, TINY_DATA)
    assert len(table.rows) == 1
    assert table.rows[0].scores == [plain.final.miou]


def test_table_formats():
    table = AblationTable("block_type", [AblationRow("cnn_only", [0.5, 0.7]), AblationRow("cnn_mamba", [0.8, 0.8])], [0, 1])
    text = table.format()
    assert "0.6000 ± 0.1000" in text and "seeds: 0, 1" in text
    add = table.format_additive(labels={"cnn_mamba": "Mamba"})
    assert "baseline (cnn_only)" in add and "+ Mamba" in add and "(+0.2000)" in add
