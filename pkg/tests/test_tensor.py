import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from latentmem import tensor as T
from latentmem.layers import MLP
from gradcheck import check_op, numeric_grad, rel_error


def test_matmul_ones():
    out = T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((3, 2))))
    assert np.array_equal(out.data, np.full((2, 2), 3.0))


def test_matmul_identity():
    x = np.random.default_rng(0).normal(size=(4, 5))
    assert np.array_equal((T.Tensor(np.eye(4)) @ T.Tensor(x)).data, x)


def test_matmul_brute_force():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
    ref = np.zeros((3, 3))
    for i in range(3):
        for j in range(3):
            for k in range(3):
                ref[i, j] += a[i, k] * b[k, j]
    assert np.max(np.abs((T.Tensor(a) @ T.Tensor(b)).data - ref)) < 1e-12


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(T.ShapeError, match=r"\(2, 3\).*\(4, 2\)"):
        T.Tensor(np.ones((2, 3))) @ T.Tensor(np.ones((4, 2)))


def test_softmax_single_unmasked():
    out = T.softmax_masked(T.Tensor([0.0, 0.0]), np.array([0.0, -np.inf]))
    assert out.data.tolist() == [1.0, 0.0]


def test_softmax_symmetry():
    out = T.softmax_masked(T.Tensor([1.0, 1.0, 1.0]), np.zeros(3))
    assert np.allclose(out.data, 1 / 3, atol=1e-15)


def test_softmax_matches_exp_normalise():
    x = np.random.default_rng(2).normal(size=5)
    ref = np.exp(x) / np.exp(x).sum()
    assert np.max(np.abs(T.softmax_masked(T.Tensor(x)).data - ref)) < 1e-12


def test_softmax_fully_masked_row_is_error():
    with pytest.raises(ValueError):
        T.softmax_masked(T.Tensor([1.0, 2.0]), np.array([-np.inf, -np.inf]))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(2, 9), st.integers(0, 10**6))
def test_softmax_rows_sum_to_one_and_masked_are_zero(rows, cols, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(scale=5.0, size=(rows, cols))
    mask = np.where(rng.random((rows, cols)) < 0.4, -np.inf, 0.0)
    mask[:, rng.integers(cols)] = 0.0  # keep one entry per row
    out = T.softmax_masked(T.Tensor(x), mask).data
    assert np.all(np.abs(out.sum(axis=-1) - 1.0) < 1e-9)
    assert np.all(out[np.isinf(mask)] == 0.0)


def test_backward_sum_gives_ones():
    x = T.parameter(np.random.default_rng(3).normal(size=(2, 3, 4)))
    T.backward(x.sum())
    assert np.array_equal(x.grad, np.ones((2, 3, 4)))


def test_backward_quadratic():
    x = T.parameter([1.0, 2.0])
    T.backward((x * x).sum())
    assert x.grad.tolist() == [2.0, 4.0]


def test_backward_non_scalar_is_error():
    x = T.parameter([1.0, 2.0])
    with pytest.raises(T.ShapeError):
        T.backward(x * 2.0)


def test_backward_accumulates_until_reset():
    x = T.parameter([1.0, 2.0])
    T.backward((x * x).sum())
    T.backward((x * x).sum())
    assert x.grad.tolist() == [4.0, 8.0]
    T.zero_grad([x])
    T.backward(x.sum())
    assert x.grad.tolist() == [1.0, 1.0]


def test_backward_visits_shared_node_once():
    x = T.parameter([3.0])
    y = x * 2.0
    z = y + y + y  # y reached three times
    T.backward(z.sum())
    assert x.grad.tolist() == [6.0]


def test_no_grad_builds_no_graph():
    x = T.parameter([1.0])
    with T.no_grad():
        y = x * 3.0
    assert y.is_leaf and not y.requires_grad


def test_mlp_matches_finite_differences():
    rng = np.random.default_rng(4)
    mlp = MLP(5, 7, rng)
    x = T.Tensor(rng.normal(size=(3, 5)))
    params = mlp.named_parameters()

    def loss():
        return (mlp(x) * mlp(x)).sum()

    T.backward(loss())
    for name, p in params.items():
        def f(v, p=p):
            old = p.data
            p.data = v
            out = float(loss().data)
            p.data = old
            return out
        num = numeric_grad(f, p.data.copy(), 1e-4)
        assert rel_error(p.grad, num) < 1e-4, name


RNG = np.random.default_rng(5)
UNARY = {
    "exp": (T.exp, RNG.normal(size=(3, 4))),
    "log": (T.log, RNG.uniform(0.5, 2.0, size=(3, 4))),
    "tanh": (T.tanh, RNG.normal(size=(3, 4))),
    "relu": (T.relu, RNG.normal(size=(3, 4)) + np.sign(RNG.normal(size=(3, 4))) * 0.1),
    "gelu": (T.gelu, RNG.normal(size=(3, 4))),
    "neg": (T.neg, RNG.normal(size=(3, 4))),
    "power": (lambda a: T.power(a, 3.0), RNG.normal(size=(3, 4))),
    "clip": (lambda a: T.clip(a, -0.5, 0.5), np.array([[-1.0, -0.2, 0.3, 0.9]])),
    "sum_axis": (lambda a: T.sum_(a, axis=1, keepdims=True), RNG.normal(size=(3, 4))),
    "mean": (lambda a: T.mean(a, axis=0), RNG.normal(size=(3, 4))),
    "reshape": (lambda a: T.reshape(a, (4, 3)), RNG.normal(size=(3, 4))),
    "transpose": (lambda a: T.transpose(a, (1, 0)), RNG.normal(size=(3, 4))),
    "take": (lambda a: T.take(a, (np.array([0, 2, 2]), slice(1, 3))), RNG.normal(size=(3, 4))),
    "softmax": (lambda a: T.softmax_masked(a, np.array([0.0, -np.inf, 0.0, 0.0])), RNG.normal(size=(3, 4))),
    "log_softmax": (lambda a: T.log_softmax(a), RNG.normal(size=(3, 4))),
}
BINARY = {
    "add_broadcast": (T.add, RNG.normal(size=(3, 4)), RNG.normal(size=(4,))),
    "mul_broadcast": (T.mul, RNG.normal(size=(3, 4)), RNG.normal(size=(3, 1))),
    "minimum": (T.minimum, RNG.normal(size=(3, 4)), RNG.normal(size=(3, 4))),
    "matmul": (T.matmul, RNG.normal(size=(2, 3, 4)), RNG.normal(size=(4, 5))),
    "concat": (lambda a, b: T.concat([a, b], axis=0), RNG.normal(size=(2, 4)), RNG.normal(size=(3, 4))),
    "stack": (lambda a, b: T.stack([a, b], axis=1), RNG.normal(size=(2, 4)), RNG.normal(size=(2, 4))),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients(name):
    op, x = UNARY[name]
    assert check_op(op, x) < 1e-4


@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_gradients(name):
    op, a, b = BINARY[name]
    assert check_op(op, a, b) < 1e-4


def test_layer_norm_gradient():
    rng = np.random.default_rng(6)
    err = check_op(T.layer_norm, rng.normal(size=(3, 6)), rng.normal(size=6), rng.normal(size=6))
    assert err < 1e-4


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6))
def test_random_composite_gradient(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(2, 3)), rng.normal(size=(3, 2))
    op = lambda x, y: T.tanh(x @ y) * T.softmax_masked(x @ y)
    assert check_op(op, a, b) < 1e-4
