import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from meepo.errors import DomainError, ParameterError
from meepo.numerics import ParamStore, Tensor, grad_check, mul, permute_rows, precision, sum_all
from meepo.ssm import (
    DIRECTIONS, ScanDirections, SSMConfig, SSMParams, bidirectional_strided_ssm, direction_order,
    forget_gates, init_mamba_params, init_ssm_params, inverse_permutation, mamba_module, scan_core,
    selective_scan, strided_permutation, zoh_discretize,
)


def ssm_params(seed, D=3, N=4, R=2, d_skip=True):
    store = ParamStore()
    with precision(np.float64):
        p = init_ssm_params(store, "s", D, N, R, np.random.default_rng(seed), d_skip)
    rng = np.random.default_rng(seed + 100)
    # move away from the tiny default step sizes so the recurrence mixes noticeably
    p.delta_bias.data[:] = rng.uniform(-1.0, 0.5, D)
    p.B_proj.data[:] = rng.standard_normal((D, N))
    p.C_proj.data[:] = rng.standard_normal((D, N))
    return p


def test_zoh_examples():
    abar, bbar = zoh_discretize(-1.0, 1.0, math.log(2))
    assert abar == pytest.approx(0.5, abs=1e-12) and bbar == pytest.approx(0.5, abs=1e-12)
    _, bbar = zoh_discretize(1e-12, 1.0, 1.0)
    assert bbar == pytest.approx(1.0, abs=1e-9)
    abar, bbar = zoh_discretize(-1.0, 1.0, 1e-9)
    assert abar == pytest.approx(1.0, abs=1e-8) and bbar == pytest.approx(0.0, abs=1e-8)
    with pytest.raises(DomainError):
        zoh_discretize(-1.0, 1.0, 0.0)


def test_zoh_continuous_across_limit_branch():
    a = np.array([-1e-7, -1e-8 * 0.999, 1e-8 * 0.999, 1e-7])
    _, bbar = zoh_discretize(a, 1.0, 1.0)
    np.testing.assert_allclose(bbar, 1.0 + a / 2, atol=1e-12)


def test_scan_hand_unroll():
    one = lambda v: Tensor(np.array(v, dtype=np.float64))
    y = scan_core(one([[1.0], [1.0]]), one([[math.log(2)]] * 2), one([[-1.0]]), one([[1.0], [1.0]]), one([[1.0], [1.0]]))
    np.testing.assert_allclose(y.data.ravel(), [0.5, 0.75], atol=1e-12)


def test_scan_zero_input():
    p = ssm_params(0)
    y = selective_scan(Tensor(np.zeros((5, 3))), p)
    np.testing.assert_array_equal(y.data, 0)


def test_scan_matches_naive_recurrence():
    p = ssm_params(1)
    u = np.random.default_rng(1).standard_normal((6, 3))
    y = selective_scan(Tensor(u), p).data
    ut = Tensor(u)
    from meepo.ssm import ssm_inputs

    delta, A, B, C = (t.data for t in ssm_inputs(ut, p))
    h = np.zeros((3, 4))
    ref = []
    for t in range(6):
        abar, bbar = zoh_discretize(A, B[t][None, :], delta[t][:, None])
        h = abar * h + bbar * u[t][:, None]
        ref.append(h @ C[t] + p.D_skip.data * u[t])
    np.testing.assert_allclose(y, ref, rtol=1e-10, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 9), st.integers(0, 10_000))
def test_reverse_equals_flipped_forward(L, seed):
    p = ssm_params(seed % 7)
    u = np.random.default_rng(seed).standard_normal((L, 3))
    rev = selective_scan(Tensor(u), p, reverse=True).data
    fwd = selective_scan(Tensor(u[::-1].copy()), p).data[::-1]
    np.testing.assert_array_equal(rev, fwd)


def test_strided_permutation_examples():
    assert strided_permutation(6, 2).tolist() == [0, 2, 4, 1, 3, 5]
    assert strided_permutation(5, 2).tolist() == [0, 2, 4, 1, 3]
    assert strided_permutation(7, 1).tolist() == list(range(7))
    assert direction_order(6, "strided_backward", 2).tolist() == [5, 3, 1, 4, 2, 0]
    with pytest.raises(ParameterError):
        strided_permutation(0, 2)


def test_scan_directions_validation():
    with pytest.raises(ParameterError):
        ScanDirections(directions=("sideways",))
    with pytest.raises(ParameterError):
        ScanDirections(stride=1)
    assert ScanDirections.preset("bidirectional").directions == ("forward", "backward")
    assert ScanDirections(share_params=True).parameter_keys() == ("forward",)


def _param_dict(seed, keys=DIRECTIONS):
    return {d: ssm_params(seed + i) for i, d in enumerate(keys)}


def test_single_direction_is_plain_scan():
    params = _param_dict(2)
    u = Tensor(np.random.default_rng(2).standard_normal((7, 3)))
    y = bidirectional_strided_ssm(u, params, ScanDirections(directions=("forward",)))
    np.testing.assert_array_equal(y.data, selective_scan(u, params["forward"]).data)


def test_tied_bidirectional_palindrome():
    p = ssm_params(4)
    rng = np.random.default_rng(4)
    half = rng.standard_normal((2, 3))
    u = np.concatenate([half, half[::-1]])
    y = bidirectional_strided_ssm(Tensor(u), {"forward": p}, ScanDirections(directions=("forward", "backward"), share_params=True))
    np.testing.assert_allclose(y.data, y.data[::-1], atol=1e-12)


def _jacobian_column(fn, u, t_src):
    h = 1e-6
    up, um = u.copy(), u.copy()
    up[t_src] += h
    um[t_src] -= h
    return (fn(up) - fn(um)) / (2 * h)


def test_strided_predecessor_sensitivity():
    """Token 5 (index 4) sees token 3 (index 2) through the strided scan but not through the plain one."""
    p = ssm_params(5)
    u = np.random.default_rng(5).standard_normal((6, 3))
    fwd = lambda x: selective_scan(Tensor(x), p).data
    sfwd = lambda x: bidirectional_strided_ssm(Tensor(x), {"strided_forward": p}, ScanDirections(directions=("strided_forward",))).data
    # index 3 precedes index 4 in plain order, follows it in strided order [0,2,4,1,3,5]
    assert np.abs(_jacobian_column(fwd, u, 3)[4]).max() > 1e-6
    assert np.abs(_jacobian_column(sfwd, u, 3)[4]).max() == 0
    # index 2 is the immediate strided predecessor of index 4
    assert np.abs(_jacobian_column(sfwd, u, 2)[4]).max() > 1e-6


def test_forget_gate_bounds():
    p = ssm_params(6)
    g = forget_gates(np.random.default_rng(6).standard_normal((20, 3)) * 5, p)
    assert np.all(g > 0) and np.all(g < 1)


def test_scan_gradients():
    p = ssm_params(7, D=2, N=3, R=1)
    rng = np.random.default_rng(7)
    u0 = rng.standard_normal((5, 2))
    w = Tensor(rng.standard_normal((5, 2)))
    f = lambda u: sum_all(mul(selective_scan(u, p), w))
    assert grad_check(f, u0) < 1e-5
    for name in ("A_log", "delta_down", "delta_up", "delta_bias", "B_proj", "C_proj", "D_skip"):
        def g(x, name=name):
            return sum_all(mul(selective_scan(Tensor(u0), dataclasses.replace(p, **{name: x})), w))

        assert grad_check(g, getattr(p, name).data) < 1e-5, name


def test_bidirectional_gradient():
    params = _param_dict(8)
    rng = np.random.default_rng(8)
    u0 = rng.standard_normal((7, 3))
    w = Tensor(rng.standard_normal((7, 3)))
    f = lambda u: sum_all(mul(bidirectional_strided_ssm(u, params, ScanDirections(stride=3)), w))
    assert grad_check(f, u0) < 1e-5


def _mamba(seed, cfg, zero_out=False, C=4):
    store = ParamStore()
    with precision(np.float64):
        return init_mamba_params(store, "m", C, cfg, np.random.default_rng(seed), zero_out)


def test_mamba_zero_out_proj():
    p = _mamba(0, SSMConfig(state_dim=4), zero_out=True)
    y = mamba_module(Tensor(np.random.default_rng(0).standard_normal((6, 4))), p)
    np.testing.assert_array_equal(y.data, 0)


def test_mamba_causal_prefix_invariance():
    cfg = SSMConfig(state_dim=4, conv_mode="causal", directions=("forward",))
    for seed in range(5):
        p = _mamba(seed, cfg)
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((8, 4))
        t = int(rng.integers(0, 7))
        x2 = x.copy()
        x2[t + 1 :] += rng.standard_normal((7 - t, 4))
        a = mamba_module(Tensor(x), p, "causal", cfg.scan_directions()).data
        b = mamba_module(Tensor(x2), p, "causal", cfg.scan_directions()).data
        np.testing.assert_array_equal(a[: t + 1], b[: t + 1])


def test_mamba_causal_free_sees_future():
    cfg = SSMConfig(state_dim=4)
    p = _mamba(1, cfg)
    x = np.random.default_rng(1).standard_normal((8, 4))
    fn = lambda v: mamba_module(Tensor(v), p, "symmetric", cfg.scan_directions()).data
    assert np.abs(_jacobian_column(fn, x, 6)[2]).max() > 1e-8


def test_mamba_gradient():
    cfg = SSMConfig(state_dim=3, conv_kernel=3)
    p = _mamba(2, cfg, C=3)
    rng = np.random.default_rng(2)
    x0 = rng.standard_normal((6, 3))
    w = Tensor(rng.standard_normal((6, 3)))
    assert grad_check(lambda x: sum_all(mul(mamba_module(x, p, "symmetric", cfg.scan_directions()), w)), x0) < 1e-5
    assert grad_check(lambda x: sum_all(mul(mamba_module(x, p, "causal", cfg.scan_directions()), w)), x0) < 1e-5


def test_permutation_inverse():
    perm = strided_permutation(11, 3)
    inv = inverse_permutation(perm)
    x = Tensor(np.arange(11.0)[:, None])
    np.testing.assert_array_equal(permute_rows(permute_rows(x, perm), inv).data, x.data)
