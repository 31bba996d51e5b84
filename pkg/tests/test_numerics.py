import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kgfuse import numerics as nx

from gradcheck import grad_error, projection, weighted_sum


def triple_loop_matmul(a, b):
    n, k = a.shape
    k2, m = b.shape
    assert k == k2
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


def adam_oracle(w, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Reference update sequence written straight from the textbook recurrence."""
    m = [0.0] * len(w)
    v = [0.0] * len(w)
    w = list(w)
    for t, g in enumerate(grads, start=1):
        for i in range(len(w)):
            m[i] = beta1 * m[i] + (1 - beta1) * g[i]
            v[i] = beta2 * v[i] + (1 - beta2) * g[i] ** 2
            m_hat = m[i] / (1 - beta1 ** t)
            v_hat = v[i] / (1 - beta2 ** t)
            w[i] = w[i] - lr * m_hat / (math.sqrt(v_hat) + eps)
    return w


# ---- matmul

def test_matmul_identity_and_zero():
    a = np.random.default_rng(0).normal(size=(3, 3))
    assert np.array_equal(nx.matmul(a, np.eye(3)).data, a)
    assert not nx.matmul(a, np.zeros((3, 3))).data.any()


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(1)
    for _ in range(20):
        a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))
        assert np.max(np.abs(nx.matmul(a, b).data - triple_loop_matmul(a, b))) < 1e-12


def test_matmul_mismatch_names_both_shapes():
    with pytest.raises(nx.DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
        nx.matmul(np.ones((2, 3)), np.ones((4, 5)))


# ---- softmax and sigmoid

def test_softmax_values():
    assert np.allclose(nx.softmax(np.array([0.0, 0.0])).data, [0.5, 0.5], atol=1e-15)
    assert np.allclose(nx.softmax(np.array([0.0, math.log(3.0)])).data, [0.25, 0.75], atol=1e-15)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12), st.floats(-100, 100))
def test_softmax_shift_invariance_and_normalization(values, shift):
    v = np.array(values)
    p = nx.softmax(v).data
    assert abs(p.sum() - 1.0) < 1e-12 and (p >= 0).all()
    assert np.allclose(nx.softmax(v + shift).data, p, atol=1e-12)


def test_softmax_empty_is_domain_error():
    with pytest.raises(nx.ContractError):
        nx.softmax(np.zeros(0))


def test_softmax_large_inputs_stay_finite():
    p = nx.softmax(np.array([1000.0, 1001.0])).data
    assert np.isfinite(p).all()


def test_sigmoid_values():
    assert nx.sigmoid(0.0).data == 0.5
    assert abs(nx.sigmoid(math.log(3.0)).data - 0.75) < 1e-15
    x = np.linspace(-30, 30, 101)
    assert np.allclose(nx.sigmoid(-x).data, 1.0 - nx.sigmoid(x).data, atol=1e-15)
    mid = nx.sigmoid(np.linspace(-20, 20, 41)).data
    assert ((mid > 0) & (mid < 1)).all()


def test_nonfinite_values_raise():
    with pytest.raises(nx.NumericalError):
        nx.log(nx.Tensor(np.array([0.0, 1.0])))
    with pytest.raises(nx.NumericalError):
        nx.Tensor(np.array([np.nan]))


# ---- backward

def test_backward_square():
    x = nx.Parameter("x", 3.0)
    nx.backward(nx.square(x))
    assert x.grad == 6.0


def test_backward_sigmoid_chain():
    x = nx.Parameter("x", 0.0)
    nx.backward(nx.sigmoid(nx.mul(x, 2.0)))
    assert abs(x.grad - 0.5) < 1e-15


def test_backward_accumulates_until_reset():
    x = nx.Parameter("x", 2.0)
    nx.backward(nx.square(x))
    nx.backward(nx.square(x))
    assert x.grad == 8.0
    nx.zero_grad([x])
    assert x.grad == 0.0


def test_backward_rejects_nonscalar():
    x = nx.Parameter("x", np.ones(3))
    with pytest.raises(nx.ContractError):
        nx.backward(nx.mul(x, 2.0))


def test_backward_shared_subexpression():
    x = nx.Parameter("x", 1.5)
    y = nx.mul(x, x)
    nx.backward(nx.add(y, y))
    assert x.grad == 6.0


def test_composite_graph_matches_finite_differences():
    rng = np.random.default_rng(2)
    for _ in range(20):
        w = nx.Parameter("w", rng.normal(size=(4, 3)))
        x = nx.Parameter("x", rng.normal(size=(5, 4)))
        err = grad_error(lambda: nx.tsum(nx.square(nx.sigmoid(nx.matmul(x, w)))), [w, x])
        assert err < 1e-6


# every primitive, 20 random points each
UNARY = {
    "exp": nx.exp,
    "log": lambda t: nx.log(nx.add(nx.square(t), 0.5)),
    "sqrt": lambda t: nx.sqrt(nx.add(nx.square(t), 0.5)),
    "relu": nx.relu,
    "sigmoid": nx.sigmoid,
    "tanh": nx.tanh,
    "square": nx.square,
    "div": lambda t: nx.div(t, nx.add(nx.square(t), 1.0)),
    "mean": lambda t: nx.tmean(t, axis=0),
    "sum_keepdims": lambda t: nx.tsum(t, axis=1, keepdims=True),
    "transpose": lambda t: nx.transpose(t),
    "reshape": lambda t: nx.reshape(t, (-1,)),
    "softmax": lambda t: nx.softmax(t, axis=-1),
    "masked_softmax": lambda t: nx.softmax(t, axis=-1, mask=np.array([True, False, True, True])),
    "log_softmax": lambda t: nx.log_softmax(t, axis=-1),
    "concat": lambda t: nx.concat([t, nx.square(t)], axis=0),
    "index": lambda t: t[np.array([0, 2, 0])],
    "scatter": lambda t: nx.scatter_add_rows(t, np.array([1, 1, 0]), 2),
    "replace_rows": lambda t: nx.replace_rows(t, np.array([1]), nx.mul(t[np.array([2])], 3.0)),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_primitive_gradients(name):
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    op = UNARY[name]
    for _ in range(20):
        x = nx.Parameter("x", rng.normal(size=(3, 4)))
        if name == "relu":
            x.data[np.abs(x.data) < 1e-3] = 0.5
        weights = projection(rng, op(nx.Tensor(x.data)).shape)
        assert grad_error(lambda: weighted_sum(op(x), weights), [x]) < 1e-6


def test_layer_norm_and_cross_entropy_gradients():
    rng = np.random.default_rng(3)
    for _ in range(20):
        x = nx.Parameter("x", rng.normal(size=(4, 6)))
        g = nx.Parameter("g", rng.normal(size=6))
        b = nx.Parameter("b", rng.normal(size=6))
        proj = projection(rng, (4, 6))
        assert grad_error(lambda: weighted_sum(nx.layer_norm(x, g, b), proj), [x, g, b]) < 1e-6
        targets = rng.integers(0, 6, size=4)
        assert grad_error(lambda: nx.cross_entropy(x, targets), [x]) < 1e-6


def test_broadcast_binary_gradients():
    rng = np.random.default_rng(4)
    for _ in range(20):
        a = nx.Parameter("a", rng.normal(size=(3, 4)))
        b = nx.Parameter("b", rng.normal(size=(4,)))
        proj = projection(rng, (3, 4))
        for op in (nx.add, nx.sub, nx.mul):
            assert grad_error(lambda: weighted_sum(op(a, b), proj), [a, b]) < 1e-6


def test_batched_matmul_gradient():
    rng = np.random.default_rng(5)
    for _ in range(20):
        a = nx.Parameter("a", rng.normal(size=(2, 3, 4)))
        b = nx.Parameter("b", rng.normal(size=(4, 5)))
        proj = projection(rng, (2, 3, 5))
        assert grad_error(lambda: weighted_sum(nx.matmul(a, b), proj), [a, b]) < 1e-6


# ---- optimizers

def test_zero_learning_rate_leaves_parameters():
    for kind in ("SGD", "ADAM"):
        p = nx.Parameter("p", np.array([1.0, -2.0]))
        p.grad = np.array([0.3, 0.4])
        nx.optimizer_step(nx.OptimizerState(kind=kind, learning_rate=0.0), [p])
        assert np.array_equal(p.data, [1.0, -2.0])


def test_sgd_step():
    p = nx.Parameter("p", 1.0)
    p.grad = np.array(0.5)
    nx.optimizer_step(nx.OptimizerState(kind="SGD", learning_rate=0.1), [p])
    assert abs(p.data - 0.95) < 1e-15


def test_adam_matches_oracle():
    rng = np.random.default_rng(6)
    w0 = rng.normal(size=5)
    grads = [rng.normal(size=5) for _ in range(7)]
    p = nx.Parameter("p", w0.copy())
    state = nx.OptimizerState(kind="ADAM", learning_rate=1e-3)
    for g in grads:
        p.grad = g.copy()
        nx.optimizer_step(state, [p])
    assert np.max(np.abs(p.data - adam_oracle(w0, grads, 1e-3))) < 1e-12


def test_adam_first_step_is_learning_rate_sized():
    rng = np.random.default_rng(7)
    g = rng.normal(size=8)
    p = nx.Parameter("p", np.zeros(8))
    p.grad = g
    nx.optimizer_step(nx.OptimizerState(kind="ADAM", learning_rate=1e-3), [p])
    oracle = adam_oracle(np.zeros(8), [g], 1e-3)
    assert np.max(np.abs(p.data - oracle)) < 1e-9
    # |step| = lr |g| / (|g| + eps), so the shortfall from lr is lr eps / (|g| + eps)
    assert np.all(np.abs(np.abs(p.data) - 1e-3) <= 1e-3 * 1e-8 / np.abs(g) + 1e-15)
    assert np.array_equal(np.sign(p.data), -np.sign(g))


def test_missing_gradient_names_parameter():
    p = nx.Parameter("encoder.w", np.ones(2))
    with pytest.raises(nx.ContractError, match="encoder.w"):
        nx.optimizer_step(nx.OptimizerState(), [p])
