import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from drwkv import tensor as tn
from drwkv.rng import Rng
from drwkv.verify import grad_close, random_wkv_case, rel_err, wkv_gradient_check
from drwkv.wkv import (ScanState, WkvParams, bi_wkv, inject_fault, wkv_backward, wkv_bidirectional,
                       wkv_causal, wkv_flops, wkv_oracle)


def test_single_token_returns_value():
    k = np.array([[3.0, -70.0]])
    v = np.array([[0.25, -2.0]])
    params = WkvParams([0.3, 1.0], [2.0, -1.0])
    assert np.allclose(wkv_causal(k, v, params), v)
    assert np.allclose(wkv_bidirectional(k, v, params), v)
    assert np.allclose(wkv_oracle(k, v, params), v)


def test_decay_free_causal_is_running_mean():
    v = Rng(0).normal((6, 3), np.float64)
    h = wkv_causal(np.zeros((6, 3)), v, WkvParams.zeros(3))
    ref = np.cumsum(v, axis=0) / np.arange(1, 7)[:, None]
    assert np.allclose(h, ref, rtol=1e-12)


def test_decay_free_bidirectional_is_global_mean():
    v = Rng(1).normal((9, 2), np.float64)
    h = wkv_bidirectional(np.zeros((9, 2)), v, WkvParams.zeros(2))
    assert np.allclose(h, v.mean(axis=0), rtol=1e-12)


def test_oracle_symmetric_mean():
    h = wkv_oracle(np.zeros((2, 1)), np.array([[1.0], [3.0]]), WkvParams.zeros(1))
    assert np.allclose(h, [[2.0], [2.0]])


def test_causal_matches_oracle_large_keys():
    rng = Rng(2)
    k = (rng.uniform((32, 8)) * 2 - 1) * 50
    v = rng.uniform((32, 8)) * 2 - 1
    params = WkvParams(rng.uniform(8), rng.uniform(8) - 0.5)
    h = wkv_causal(k, v, params)
    assert np.all(np.isfinite(h))
    assert rel_err(h, wkv_oracle(k, v, params, causal=True)) <= 1e-5


def test_bidirectional_matches_oracle_with_decay_and_bonus():
    rng = Rng(3)
    k = rng.uniform((48, 4)) * 4 - 2
    v = rng.uniform((48, 4)) * 2 - 1
    params = WkvParams(rng.uniform(4) * 3 + 0.1, rng.uniform(4) * 2 - 1)
    assert rel_err(wkv_bidirectional(k, v, params), wkv_oracle(k, v, params)) <= 1e-5


def test_agrees_with_oracle_on_200_cases():
    rng = Rng(4)
    worst = 0.0
    for _ in range(200):
        k, v, params = random_wkv_case(rng, int(rng.integers(1, 65)), int(rng.integers(1, 17)))
        worst = max(worst, rel_err(wkv_bidirectional(k, v, params), wkv_oracle(k, v, params)))
    assert worst <= 1e-5


def test_batched_lanes_match_single():
    rng = Rng(5)
    k = rng.normal((3, 10, 4)) * 5
    v = rng.normal((3, 10, 4))
    params = WkvParams(rng.uniform(4), rng.uniform(4))
    batched = wkv_bidirectional(k, v, params)
    for b in range(3):
        assert np.array_equal(batched[b], wkv_bidirectional(k[b], v[b], params))


def test_overflow_robust_float32():
    k = np.full((16, 2), 80.0, np.float32)
    k[3] = -80.0
    v = Rng(6).normal((16, 2))
    params = WkvParams([0.5, 2.0], [1.0, -1.0])
    h = wkv_bidirectional(k, v, params)
    assert h.dtype == np.float32 and np.all(np.isfinite(h))
    assert rel_err(h, wkv_oracle(k, v, params)) <= 1e-5


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 40), st.integers(1, 6), st.floats(-60, 60), st.integers(0, 10 ** 6))
def test_shift_invariance(J, D, c, seed):
    k, v, params = random_wkv_case(Rng(seed), J, D, 30.0)
    assert rel_err(wkv_bidirectional(k + c, v, params), wkv_bidirectional(k, v, params)) <= 1e-5


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 64), st.integers(1, 16), st.integers(0, 10 ** 6))
def test_oracle_equivalence_property(J, D, seed):
    k, v, params = random_wkv_case(Rng(seed), J, D)
    assert rel_err(wkv_bidirectional(k, v, params), wkv_oracle(k, v, params)) <= 1e-5


def test_scan_state_invariants():
    rng = Rng(7)
    st_ = ScanState.empty(3)
    ks = rng.normal((5, 3)) * 10
    for t in range(5):
        st_ = st_.absorb(ks[t], rng.normal(3), decay=0.2)
        assert np.all(st_.b > 0) and np.all(np.isfinite(st_.read()))
    # p equals the max over absorbed effective exponents
    eff = ks - 0.2 * (4 - np.arange(5))[:, None]
    assert np.allclose(st_.p, eff.max(axis=0))


def test_backward_trivial_cases():
    rng = Rng(8)
    k, v = rng.normal((7, 3)), rng.normal((7, 3))
    params = WkvParams(rng.uniform(3), rng.uniform(3))
    dk, dv, dw, du = wkv_backward(k, v, params, np.zeros((7, 3)))
    assert not np.any(dk) and not np.any(dv) and not np.any(dw) and not np.any(du)
    g = rng.normal((1, 3))
    dk, dv, dw, du = wkv_backward(k[:1], v[:1], params, g)
    assert np.allclose(dv, g) and np.allclose(dk, 0) and np.allclose(du, 0)
    with pytest.raises(ValueError):
        wkv_backward(None, v, params, g)


def test_backward_matches_finite_differences():
    c = wkv_gradient_check(J=16, D=4, seed=3)
    assert c.ok, c.detail


def test_recorded_op_grads_flow():
    rng = Rng(9)
    k = tn.Tensor(rng.normal((2, 5, 4)), requires_grad=True)
    v = tn.Tensor(rng.normal((2, 5, 4)), requires_grad=True)
    w = tn.Tensor(rng.uniform(4) + 0.1, requires_grad=True)
    u = tn.Tensor(rng.normal(4), requires_grad=True)
    out = bi_wkv(k, v, w, u)
    tn.backward(tn.sum(tn.mul(out, np.cos(np.arange(40)).reshape(2, 5, 4))))
    for t in (k, v, w, u):
        assert t.grad is not None and t.grad.shape == t.shape and np.any(t.grad)


def test_fault_injection_breaks_equivalence():
    rng = Rng(10)
    k, v = rng.normal((12, 3)), rng.normal((12, 3))
    params = WkvParams([1.0, 2.0, 3.0], [0.0, 0.0, 0.0], normalize_decay=False)
    inject_fault("wkv-sign")
    try:
        assert rel_err(wkv_bidirectional(k, v, params), wkv_oracle(k, v, params)) > 1e-3
    finally:
        inject_fault(None)
    with pytest.raises(ValueError):
        inject_fault("nonsense")


def test_errors():
    with pytest.raises(ValueError):
        wkv_bidirectional(np.zeros((0, 2)), np.zeros((0, 2)), WkvParams.zeros(2))
    with pytest.raises(ValueError):
        WkvParams([-1.0], [0.0])
    with pytest.raises(ValueError):
        wkv_oracle(np.zeros((4097, 1)), np.zeros((4097, 1)), WkvParams.zeros(1))


def test_flops_formula():
    assert wkv_flops(256, 768) == 2_555_904
    assert wkv_flops(1, 1) == 13
    assert wkv_flops(1024, 384) == 5_111_808
    assert wkv_flops(512, 768) == 2 * wkv_flops(256, 768)


def test_normalized_decay_divides_by_length():
    p = WkvParams([2.0], [0.0], normalize_decay=True)
    assert p.effective_decay(8)[0] == 0.25
    assert WkvParams([2.0], [0.0], normalize_decay=False).effective_decay(8)[0] == 2.0
