import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mgrade.mingru import (GruParams, combine, gru_bwd, gru_fwd, gru_gates, gru_scan, gru_sequential,
                           gru_step, init_gru, linear_scan)
from mgrade.numcore import Rng, finite_diff_grad, grad_rel_error


def _params(H, Wz=0.0, bz=0.0, Wh=None, bh=0.0):
    return GruParams(np.full((H, H), Wz), np.full(H, bz), np.eye(H) if Wh is None else Wh, np.full(H, bh))


def test_param_count():
    assert init_gru(Rng(0), 7).num_params() == 2 * 49 + 2 * 7


def test_half_gate():
    z, _ = gru_gates(_params(3), Rng(0).normal((2, 4, 3)))
    np.testing.assert_array_equal(z, 0.5)


def test_saturated_gate():
    z, _ = gru_gates(_params(2, bz=50.0), Rng(0).normal((1, 3, 2)))
    assert np.all(z > 1 - 1e-12)


def test_open_gate_copies_candidate():
    x = Rng(1).normal((2, 5, 3))
    p = _params(3, bz=60.0)
    np.testing.assert_allclose(gru_sequential(p, x), x, atol=1e-12)


def test_closed_gate_holds_state():
    p = _params(2, bz=-60.0)
    h0 = np.array([[0.3, -0.7]])
    h = gru_sequential(p, Rng(0).normal((1, 6, 2)), h0)
    np.testing.assert_allclose(h, np.broadcast_to(h0[:, None], h.shape), atol=1e-12)


def test_hand_recurrence():
    p = _params(1)
    h = gru_sequential(p, np.ones((1, 2, 1)))
    np.testing.assert_allclose(h.ravel(), [0.5, 0.75])


def test_step_matches_sequential():
    p = init_gru(Rng(2), 4, np.float64)
    x = Rng(3).normal((2, 7, 4))
    h = np.zeros((2, 4))
    out = []
    for t in range(7):
        h = gru_step(p, x[:, t], h)
        out.append(h)
    np.testing.assert_allclose(np.stack(out, 1), gru_sequential(p, x))
    # streaming state is H floats per stream whatever T is
    assert h.shape == (2, 4)


@pytest.mark.parametrize("trial", range(50))
def test_scan_equals_sequential(trial):
    rng = Rng(trial)
    p = init_gru(rng, 5, np.float64)
    x = rng.split(1).normal((2, 33, 5))
    h0 = rng.split(2).normal((2, 5))
    np.testing.assert_allclose(gru_scan(p, x, h0), gru_sequential(p, x, h0), rtol=1e-12, atol=1e-12)


def test_scan_single_step():
    p = init_gru(Rng(0), 3, np.float64)
    x = Rng(1).normal((1, 1, 3))
    np.testing.assert_allclose(gru_scan(p, x), gru_step(p, x[:, 0], np.zeros((1, 3)))[:, None])


@given(st.integers(0, 10_000))
@settings(max_examples=50, deadline=None)
def test_combine_associative(seed):
    rng = Rng(seed)
    e = [(rng.split(i).uniform(0, 1, (3,)), rng.split(10 + i).normal(3)) for i in range(3)]
    left = combine(combine(e[0], e[1]), e[2])
    right = combine(e[0], combine(e[1], e[2]))
    for a, b in zip(left, right):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)


@given(st.integers(1, 70), st.integers(0, 1000))
@settings(max_examples=50, deadline=None)
def test_linear_scan_oracle(T, seed):
    rng = Rng(seed)
    a = rng.uniform(0, 1, (2, T, 3))
    b = rng.split(1).normal((2, T, 3))
    h = np.zeros((2, 3))
    ref = []
    for t in range(T):
        h = a[:, t] * h + b[:, t]
        ref.append(h)
    np.testing.assert_allclose(linear_scan(a, b), np.stack(ref, 1), rtol=1e-12, atol=1e-12)


@given(st.integers(0, 10_000))
@settings(max_examples=50, deadline=None)
def test_contractive(seed):
    rng = Rng(seed)
    p = init_gru(rng, 3, np.float64)
    x = rng.split(1).normal((1, 20, 3))
    h0 = rng.split(2).normal((1, 3))
    h = gru_sequential(p, x, h0)
    _, ht = gru_gates(p, x)
    bound = np.maximum(np.abs(h0), np.abs(ht).max(axis=1))
    assert np.all(np.abs(h).max(axis=1) <= bound[:, :] + 1e-12)


def _fd(fn, arr):
    saved = arr.copy()

    def f(v):
        arr[...] = v
        return fn()
    g = finite_diff_grad(f, saved)
    arr[...] = saved
    return g


@pytest.mark.parametrize("mode", ["scan", "sequential"])
@pytest.mark.parametrize("trial", range(10))
def test_gru_gradcheck(mode, trial):
    rng = Rng(500 + trial)
    p = init_gru(rng, 3, np.float64)
    x = rng.split(1).normal((1, 4, 3))
    h0 = rng.split(2).normal((1, 3))
    gh = rng.split(3).normal((1, 4, 3))
    _, cache = gru_fwd(p, x, h0, mode)
    dx, grads, dh0 = gru_bwd(p, cache, gh)
    loss = lambda: float(np.sum(gru_fwd(p, x, h0, mode)[0] * gh))
    assert grad_rel_error(dx, _fd(loss, x)) < 1e-4
    assert grad_rel_error(dh0, _fd(loss, h0)) < 1e-4
    g = dict(grads.named())
    for name, arr in p.named():
        assert grad_rel_error(g[name], _fd(loss, arr)) < 1e-4, name


def test_open_gate_decouples_h0():
    p = _params(2, bz=60.0)
    _, cache = gru_fwd(p, Rng(0).normal((1, 3, 2)), np.ones((1, 2)))
    _, _, dh0 = gru_bwd(p, cache, np.ones((1, 3, 2)))
    np.testing.assert_allclose(dh0, 0.0, atol=1e-12)


def test_zero_upstream():
    p = init_gru(Rng(0), 3, np.float64)
    _, cache = gru_fwd(p, Rng(1).normal((2, 5, 3)))
    dx, grads, dh0 = gru_bwd(p, cache, np.zeros((2, 5, 3)))
    assert not dx.any() and not dh0.any()
    assert all(not a.any() for _, a in grads.named())
