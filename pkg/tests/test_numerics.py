import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from meepo.errors import DataError, DimensionError, ParameterError
from meepo.numerics import (
    ParamStore, Tape, Tensor, conv1d_padding, cross_entropy, depthwise_conv1d, gelu, grad_check,
    layer_norm, linear, mul, precision, segment_mean, silu, softmax_rows, softplus, sum_all,
)

# -ln(sigmoid(20)) evaluated as log1p(exp(-20))
CE_CONFIDENT = 2.061153620314381e-09


def T(x):
    return Tensor(np.asarray(x, dtype=np.float64))


def test_linear_examples():
    np.testing.assert_array_equal(linear(T([[1, 2]]), T(np.eye(2))).data, [[1, 2]])
    np.testing.assert_array_equal(linear(T([[1, 1]]), T([[2], [3]]), T([1])).data, [[6]])
    np.testing.assert_array_equal(linear(T([[0, 0]]), T(np.ones((2, 2))), T([5, 5])).data, [[5, 5]])


def test_linear_mismatch_names_shapes():
    with pytest.raises(DimensionError, match=r"\(1, 3\).*\(2, 2\)"):
        linear(T([[1, 2, 3]]), T(np.eye(2)))


def test_conv1d_examples():
    x = T([[1], [2], [3]])
    k = T([[1], [1]])
    np.testing.assert_array_equal(depthwise_conv1d(x, k, "causal").data.ravel(), [1, 3, 5])
    np.testing.assert_array_equal(depthwise_conv1d(x, k, "symmetric").data.ravel(), [3, 5, 3])
    for mode in ("causal", "symmetric"):
        np.testing.assert_array_equal(depthwise_conv1d(x, T([[1]]), mode).data, x.data)


def _sliding_window(x, k, left, right):
    L, K = len(x), len(k)
    xp = np.concatenate([np.zeros(left), x, np.zeros(right)])
    return np.array([sum(k[j] * xp[t + j] for j in range(K)) for t in range(L)])


@pytest.mark.parametrize("K", [1, 2, 3, 4, 5])
@pytest.mark.parametrize("mode", ["causal", "symmetric"])
def test_conv1d_matches_brute_force(K, mode):
    rng = np.random.default_rng(K)
    x = rng.standard_normal(9)
    k = rng.standard_normal(K)
    left, right = conv1d_padding(K, mode)
    assert left + right == K - 1
    ref = _sliding_window(x, k, left, right)
    got = depthwise_conv1d(T(x[:, None]), T(k[:, None]), mode).data.ravel()
    np.testing.assert_allclose(got, ref, rtol=0, atol=1e-12)


def test_conv1d_rejects_bad_mode_and_size():
    with pytest.raises(ParameterError):
        conv1d_padding(3, "same")
    with pytest.raises(ParameterError):
        conv1d_padding(0, "causal")


def test_activation_values():
    assert silu(T([0.0])).data[0] == 0
    assert softplus(T([0.0])).data[0] == pytest.approx(math.log(2), abs=1e-12)
    np.testing.assert_allclose(softmax_rows(T([[0, 0]])).data, [[0.5, 0.5]])
    big = softplus(T([800.0, -800.0])).data
    assert big[0] == 800.0 and big[1] == 0.0


def test_cross_entropy_values():
    assert float(cross_entropy(T([[0, 0]]), [0]).data) == pytest.approx(math.log(2), abs=1e-12)
    assert float(cross_entropy(T([[10, -10]]), [0]).data) == pytest.approx(CE_CONFIDENT, rel=1e-6)
    assert float(cross_entropy(T([[1, 2], [3, 4]]), [-1, -1]).data) == 0.0


def test_cross_entropy_bad_label_names_row():
    with pytest.raises(DataError, match="row 1"):
        cross_entropy(T([[1, 2], [3, 4]]), [0, 7])


def test_grad_check_examples():
    assert grad_check(lambda x: sum_all(mul(x, x)), [1.0, 2.0, 3.0]) < 1e-6
    assert grad_check(lambda x: sum_all(silu(x)), [-1.0, 0.0, 1.0]) < 1e-6
    rng = np.random.default_rng(0)
    W = T(rng.standard_normal((4, 3)))
    assert grad_check(lambda x: cross_entropy(linear(x, W), [0, 2, 1]), rng.standard_normal((3, 4))) < 1e-4


@pytest.mark.parametrize("mode", ["causal", "symmetric"])
@pytest.mark.parametrize("K", [2, 3, 4])
def test_conv1d_gradients(mode, K):
    rng = np.random.default_rng(K)
    x0 = rng.standard_normal((7, 3))
    k0 = rng.standard_normal((K, 3))
    w = T(rng.standard_normal((7, 3)))
    assert grad_check(lambda x: sum_all(mul(depthwise_conv1d(x, T(k0), mode), w)), x0) < 1e-6
    assert grad_check(lambda k: sum_all(mul(depthwise_conv1d(T(x0), k, mode), w)), k0) < 1e-6


def test_layer_norm_and_gelu_gradients():
    rng = np.random.default_rng(1)
    x0 = rng.standard_normal((5, 4))
    w = T(rng.standard_normal((5, 4)))
    g, b = T(rng.standard_normal(4)), T(rng.standard_normal(4))
    assert grad_check(lambda x: sum_all(mul(layer_norm(x, g, b), w)), x0) < 1e-5
    assert grad_check(lambda gg: sum_all(mul(layer_norm(T(x0), gg, b), w)), g.data) < 1e-6
    assert grad_check(lambda x: sum_all(mul(gelu(x), w)), x0) < 1e-6


def test_segment_mean():
    out = segment_mean(T([[1.0], [3.0], [5.0]]), [0, 0, 1], 2)
    np.testing.assert_array_equal(out.data.ravel(), [2.0, 5.0])
    with pytest.raises(DataError):
        segment_mean(T([[1.0]]), [0], 2)


def test_tape_accumulates_shared_inputs():
    x = Tensor([2.0, 3.0], requires_grad=True, dtype=np.float64)
    with Tape() as tape:
        y = sum_all(mul(x, x) + x)
    tape.backward(y)
    np.testing.assert_array_equal(x.grad, [5.0, 7.0])


def test_no_recording_without_tape():
    x = Tensor([1.0], requires_grad=True)
    y = mul(x, x)
    assert y.grad is None and x.grad is None


def test_precision_context():
    with precision(np.float32):
        assert Tensor([1.0]).dtype == np.float32
    assert Tensor([1.0]).dtype == np.float64


def test_zero_extent_rejected():
    with pytest.raises(DimensionError):
        Tensor(np.zeros((0, 3)))


def test_param_store():
    store = ParamStore()
    store.add("a.w", np.ones((2, 3)))
    store.add("b", np.zeros(4))
    assert store.num_parameters() == 10 and store.num_parameters("a.") == 6
    with pytest.raises(ParameterError):
        store.add("b", np.zeros(1))
    state = store.state_arrays()
    state["a.w"] += 1
    store.load_arrays(state)
    assert store["a.w"].data[0, 0] == 2
    with pytest.raises(DimensionError):
        store.load_arrays({"b": np.zeros(5)})


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=2, max_size=6))
def test_softmax_rows_normalized(xs):
    p = softmax_rows(T([xs])).data
    assert p.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.all(p >= 0)
