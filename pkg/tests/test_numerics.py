import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from modvlad import numerics as nx

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)
vectors = arrays(np.float64, st.integers(1, 12), elements=finite)


# -- matmul -------------------------------------------------------------------

def test_matmul_identity_and_zeros(rng):
    m = rng.standard_normal((3, 4))
    assert np.array_equal(nx.matmul(np.eye(3), m), m)
    assert np.array_equal(nx.matmul(np.zeros((2, 3)), m), np.zeros((2, 4)))


def test_matmul_matches_triple_loop(rng):
    for _ in range(10):
        a, b = rng.standard_normal((4, 4)), rng.standard_normal((4, 4))
        ref = np.array(oracles.matmul(a.tolist(), b.tolist()))
        np.testing.assert_allclose(nx.matmul(a, b), ref, rtol=1e-12, atol=1e-14)


def test_matmul_shape_mismatch():
    with pytest.raises(nx.ShapeError):
        nx.matmul(np.ones((2, 3)), np.ones((4, 2)))


# -- softmax / sigmoid --------------------------------------------------------

def test_softmax_examples():
    np.testing.assert_allclose(nx.softmax(np.array([0.0, 0.0])), [0.5, 0.5])
    np.testing.assert_allclose(nx.softmax(np.array([0.0, math.log(3)])), [0.25, 0.75], rtol=1e-12)
    out = nx.softmax(np.array([1000.0, 1000.0]))
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [0.5, 0.5])


def test_softmax_empty_raises():
    with pytest.raises(nx.DomainError):
        nx.softmax(np.array([]))


@given(vectors, finite)
def test_softmax_sums_to_one_and_shift_invariant(z, c):
    p = nx.softmax(z)
    assert abs(p.sum() - 1.0) <= 1e-9
    np.testing.assert_allclose(nx.softmax(z + c), p, atol=1e-9)


@given(vectors)
def test_log_softmax_consistent(z):
    np.testing.assert_allclose(np.exp(nx.log_softmax(z)), nx.softmax(z), atol=1e-12)


def test_sigmoid_stable_at_extremes():
    s = nx.sigmoid(np.array([-800.0, 0.0, 800.0]))
    np.testing.assert_array_equal(s, [0.0, 0.5, 1.0])


# -- BCE ----------------------------------------------------------------------

def test_bce_examples():
    assert nx.bce_with_logits(np.array([1.0, 0.0]), np.array([0.0, 0.0])) == pytest.approx(math.log(2), abs=1e-12)
    sat = nx.bce_with_logits(np.array([1.0]), np.array([40.0]))
    assert sat == pytest.approx(-math.log(1 - 1e-6), rel=1e-9)


def test_bce_matches_scalar_oracle(rng):
    for _ in range(20):
        y = (rng.random(16) < 0.5).astype(float)
        z = 3 * rng.standard_normal(16)
        assert nx.bce_with_logits(y, z) == pytest.approx(oracles.bce(y.tolist(), z.tolist()), rel=1e-12)


@given(arrays(np.float64, 6, elements=finite), arrays(np.bool_, 6))
def test_bce_nonnegative(z, y):
    assert nx.bce_with_logits(y.astype(float), z) >= 0.0


def test_bce_gradient_gradcheck(rng):
    y = (rng.random((3, 7)) < 0.4).astype(float)
    z = rng.standard_normal((3, 7))

    def f(zz):
        return nx.bce_with_logits(y, zz), nx.bce_with_logits_grad(y, zz) / 3

    assert nx.finite_diff_gradcheck(f, z) < 1e-6


def test_bce_gradient_zero_where_clamped():
    g = nx.bce_with_logits_grad(np.array([1.0, 0.0]), np.array([40.0, -40.0]))
    np.testing.assert_array_equal(g, [0.0, 0.0])


# -- L2 normalization ---------------------------------------------------------

def test_l2_normalize_examples(rng):
    np.testing.assert_allclose(nx.l2_normalize(np.array([3.0, 4.0])), [0.6, 0.8])
    np.testing.assert_array_equal(nx.l2_normalize(np.zeros(2)), [0.0, 0.0])
    u = rng.standard_normal(5)
    u /= np.linalg.norm(u)
    np.testing.assert_allclose(nx.l2_normalize(u), u, atol=1e-12)


@given(arrays(np.float64, st.integers(1, 10), elements=st.floats(-1e3, 1e3)))
def test_l2_normalize_idempotent(v):
    if np.linalg.norm(v) < 1:
        return
    once = nx.l2_normalize(v)
    np.testing.assert_allclose(nx.l2_normalize(once), once, atol=1e-9)


def test_l2_normalize_backward_gradcheck(rng):
    v = rng.standard_normal((2, 5))
    up = rng.standard_normal((2, 5))

    def f(x):
        return float((nx.l2_normalize(x) * up).sum()), nx.l2_normalize_backward(up, x)

    assert nx.finite_diff_gradcheck(f, v) < 1e-7


# -- Adam ---------------------------------------------------------------------

def test_adam_zero_gradient_keeps_params():
    params = {"w": np.array([1.0, -2.0])}
    state = nx.AdamState.zeros_like(params)
    nx.adam_step(params, {"w": np.zeros(2)}, state, lr=0.1)
    np.testing.assert_array_equal(params["w"], [1.0, -2.0])


@pytest.mark.parametrize("g", [0.3, -7.0, 1e-3])
def test_adam_first_step_moves_by_lr(g):
    params = {"w": np.array([0.0])}
    state = nx.AdamState.zeros_like(params)
    nx.adam_step(params, {"w": np.array([g])}, state, lr=0.01)
    assert params["w"][0] == pytest.approx(-0.01 * math.copysign(1, g), rel=1e-4)


def test_adam_three_steps_match_scalar_recomputation():
    grads = [0.5, -1.25, 2.0]
    params = {"w": np.array([1.5])}
    state = nx.AdamState.zeros_like(params)
    for g in grads:
        nx.adam_step(params, {"w": np.array([g])}, state, lr=0.05)
    assert params["w"][0] == pytest.approx(oracles.adam_trajectory(1.5, grads, 0.05), rel=1e-12)
    assert state.step == 3


# -- gradcheck harness --------------------------------------------------------

def test_gradcheck_polynomial():
    assert nx.finite_diff_gradcheck(lambda x: (x ** 2, 2 * x), 3.0) < 1e-8


def test_gradcheck_detects_wrong_gradient():
    assert nx.finite_diff_gradcheck(lambda x: (x ** 2, 3 * x), 3.0) > 0.1


def test_precision_modes():
    with nx.precision("train"):
        assert nx.float_dtype() == np.float32
    assert nx.float_dtype() == np.float64
    with pytest.raises(ValueError):
        nx.set_mode("half")


def test_kernels_bit_deterministic(rng):
    z = rng.standard_normal((8, 9))
    assert np.array_equal(nx.softmax(z), nx.softmax(z.copy()))
    assert nx.bce_with_logits(z > 0, z) == nx.bce_with_logits(z > 0, z.copy())
