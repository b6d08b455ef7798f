import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from trojanscan import tensor as T
from gradcheck import PRIMITIVES, check_primitive, numeric_grad, relative_error

SEEDS = range(20)


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradient_20_instances(name):
    worst = max(check_primitive(name, s) for s in SEEDS)
    assert worst < 1e-4, f"{name}: relative error {worst:.2e}"


def test_two_layer_net_gradient_h_1e4():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 6, 6, 1))
    w1 = rng.normal(size=(3, 3, 1, 2))
    w2 = rng.normal(size=(2 * 2 * 2, 3))
    labels = [0, 2]

    def loss_of(a, b):
        h = T.maxpool2d(T.relu(T.conv2d(T.Tensor(x), a)))
        return T.softmax_cross_entropy(T.matmul(T.flatten(h), b), labels)

    p1, p2 = T.Tensor(w1.copy(), requires_grad=True), T.Tensor(w2.copy(), requires_grad=True)
    with T.GradTape() as tape:
        loss = loss_of(p1, p2)
    g1, g2 = tape.gradient(loss, [p1, p2])
    n1 = numeric_grad(lambda a: loss_of(T.Tensor(a), T.Tensor(w2)).item(), w1.copy(), h=1e-4)
    n2 = numeric_grad(lambda b: loss_of(T.Tensor(w1), T.Tensor(b)).item(), w2.copy(), h=1e-4)
    assert relative_error(g1, n1) < 1e-4
    assert relative_error(g2, n2) < 1e-4


# ---------------------------------------------------------------- forward examples

def test_conv_identity_kernel():
    x = np.arange(9, dtype=np.float64).reshape(1, 3, 3, 1)
    out = T.conv2d(T.Tensor(x), T.Tensor(np.ones((1, 1, 1, 1))))
    np.testing.assert_array_equal(out.data, x)


def test_conv_all_ones_sums_to_four():
    out = T.conv2d(T.Tensor(np.ones((1, 2, 2, 1))), T.Tensor(np.ones((2, 2, 1, 1))))
    assert out.shape == (1, 1, 1, 1)
    assert out.data.item() == 4.0


def test_softmax_uniform():
    np.testing.assert_allclose(T.softmax(T.Tensor(np.zeros(3))).data, [1 / 3] * 3, rtol=1e-7)


def test_maxpool_picks_block_maxima():
    x = np.array([[1, 2, 5, 0], [3, 4, 1, 1], [0, 0, 9, 8], [0, 7, 6, 6]], dtype=np.float64)
    out = T.maxpool2d(T.Tensor(x.reshape(1, 4, 4, 1)))
    np.testing.assert_array_equal(out.data[0, :, :, 0], [[4, 5], [7, 9]])


def test_norms():
    v = T.Tensor(np.array([3.0, -4.0]))
    assert T.l1_norm(v).item() == 7.0
    assert T.l2_norm(v).item() == 5.0


# ---------------------------------------------------------------- backward examples

def test_square_gradient():
    w = T.Tensor(np.array([3.0]), requires_grad=True)
    with T.GradTape() as tape:
        loss = T.sum(T.mul(w, w))
    assert tape.backward(loss)[w].tolist() == [6.0]


@pytest.mark.parametrize("c,k", [(3, 0), (5, 2), (10, 9)])
def test_softmax_ce_gradient_at_zero(c, k):
    z = T.Tensor(np.zeros((1, c)), requires_grad=True)
    with T.GradTape() as tape:
        loss = T.cross_entropy(T.softmax(z), np.eye(c)[[k]])
    g = tape.backward(loss)[z][0]
    expect = np.full(c, 1 / c)
    expect[k] -= 1
    np.testing.assert_allclose(g, expect, atol=1e-12)


def test_unused_leaf_gets_exact_zero():
    a = T.Tensor(np.ones(3), requires_grad=True)
    b = T.Tensor(np.ones(3), requires_grad=True)
    with T.GradTape() as tape:
        loss = T.sum(T.square(a))
        T.mul(b, 2.0)
    grads = tape.backward(loss)
    assert np.all(grads[b] == 0.0)


def test_tape_consumed_after_backward():
    w = T.Tensor(np.array([1.0]), requires_grad=True)
    with T.GradTape() as tape:
        loss = T.sum(T.square(w))
    tape.backward(loss)
    assert tape.records == []


def test_non_scalar_loss_rejected():
    w = T.Tensor(np.ones(2), requires_grad=True)
    with T.GradTape() as tape:
        out = T.square(w)
    with pytest.raises(T.ShapeError):
        tape.backward(out)


def test_nested_tapes_isolated():
    a = T.Tensor(np.array([2.0]), requires_grad=True)
    b = T.Tensor(np.array([5.0]), requires_grad=True)
    with T.GradTape() as outer:
        la = T.sum(T.square(a))
        with T.GradTape() as inner:
            lb = T.sum(T.square(b))
        assert a not in inner.backward(lb)
    ga = outer.backward(la)
    assert ga[a].tolist() == [4.0]
    assert b not in ga


def test_threaded_tapes_isolated():
    results = {}

    def work(name, value):
        w = T.Tensor(np.array([value]), requires_grad=True)
        with T.GradTape() as tape:
            loss = T.sum(T.square(w))
            for _ in range(200):
                loss = T.add(loss, T.sum(T.mul(w, 0.0)))
        results[name] = tape.backward(loss)[w].item()

    threads = [threading.Thread(target=work, args=(i, float(i))) for i in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert results == {i: 2.0 * i for i in range(4)}


# ---------------------------------------------------------------- errors

def test_shape_error_names_op_and_shapes():
    with pytest.raises(T.ShapeError, match=r"matmul.*\(2, 3\).*\(4, 2\)"):
        T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((4, 2))))
    with pytest.raises(T.ShapeError, match="add"):
        T.add(T.Tensor(np.ones(3)), T.Tensor(np.ones(4)))


def test_overflow_is_an_error():
    with np.errstate(all="ignore"), pytest.raises(T.NumericalError):
        T.mul(T.Tensor(np.array([1e300])), T.Tensor(np.array([1e300])))


def test_log_of_zero_is_an_error():
    with np.errstate(all="ignore"), pytest.raises(T.NumericalError):
        T.log(T.Tensor(np.array([0.0])))


# ---------------------------------------------------------------- adam

def test_adam_first_step():
    w = T.Tensor(np.array([1.0]))
    state = T.AdamState.like(w, learning_rate=1e-3)
    T.adam_step(state, w, np.array([2.0]))
    assert state.step == 1
    assert w.item() == pytest.approx(1.0 - 1e-3 * 2 / (2 + 1e-8), abs=1e-12)
    assert w.item() == pytest.approx(0.999, abs=1e-8)


def test_adam_zero_grad_leaves_param():
    w = T.Tensor(np.array([1.0, -2.0]))
    state = T.AdamState.like(w)
    T.adam_step(state, w, np.zeros(2))
    assert w.data.tolist() == [1.0, -2.0]


def test_adam_identical_params_identical_updates():
    a, b = T.Tensor(np.array([0.5])), T.Tensor(np.array([0.5]))
    opt = T.Adam([a, b], learning_rate=0.1)
    for g in (1.0, -3.0, 0.2):
        opt.step({a: np.array([g]), b: np.array([g])})
    assert a.data.tobytes() == b.data.tobytes()
    assert [s.step for s in opt.states] == [3, 3]


def test_adam_moments_start_at_zero():
    s = T.AdamState.like(T.Tensor(np.ones((2, 2))))
    assert s.step == 0 and not s.m.any() and not s.v.any()


def test_adam_shape_mismatch():
    w = T.Tensor(np.ones(2))
    with pytest.raises(T.ShapeError):
        T.adam_step(T.AdamState.like(w), w, np.ones(3))


# ---------------------------------------------------------------- properties

finite = st.floats(-50, 50, allow_nan=False, width=64)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=finite))
def test_softmax_rows_sum_to_one(x):
    s = T.softmax(T.Tensor(x)).data
    np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-6)
    assert np.all(s >= 0)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (1, 5, 5, 2), elements=finite), arrays(np.float64, (3, 3, 2, 2), elements=finite))
def test_ops_are_deterministic(x, w):
    a = T.conv2d(T.Tensor(x), T.Tensor(w)).data
    b = T.conv2d(T.Tensor(x.copy()), T.Tensor(w.copy())).data
    assert a.tobytes() == b.tobytes()


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 8), elements=finite))
def test_sigmoid_in_unit_interval(z):
    s = T.sigmoid(T.Tensor(z)).data
    assert np.all((s >= 0) & (s <= 1))
    np.testing.assert_allclose(s + T.sigmoid(T.Tensor(-z)).data, 1.0, atol=1e-12)


def test_float32_is_default():
    assert T.Tensor([1, 2]).dtype == np.float32
    assert T.Tensor(np.ones(2)).dtype == np.float64
