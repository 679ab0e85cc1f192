import math

import numpy as np
import pytest

from personaroute import numerics as nm
from personaroute.numerics import (
    NumericsError,
    Parameter,
    ShapeError,
    Tensor,
    backward,
    binary_cross_entropy_with_logits,
    cross_entropy,
    gelu,
    layer_norm,
    matmul,
    softmax_masked,
)

from oracles import central_diff, log_softmax_direct, max_rel_err, softmax_direct


@pytest.fixture(autouse=True)
def float64_mode():
    nm.set_default_dtype(np.float64)
    yield
    nm.set_default_dtype(np.float32)


def test_matmul_identity():
    a = Tensor(np.eye(2))
    b = Tensor([[1.0, 2.0], [3.0, 4.0]])
    out = matmul(a, b)
    np.testing.assert_array_equal(out.data, [[1.0, 2.0], [3.0, 4.0]])


def test_matmul_basis_selection():
    out = matmul(Tensor([[1.0, 0.0]]), Tensor([[0.0], [5.0]]))
    np.testing.assert_array_equal(out.data, [[0.0]])


def test_matmul_shape_error_reports_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2))))


def test_matmul_gradients_match_finite_differences():
    rng = np.random.default_rng(0)
    a = Parameter(rng.normal(size=(3, 4)), "a")
    b = Parameter(rng.normal(size=(4, 2)), "b")

    def loss_tensor():
        prod = matmul(a, b)
        return nm.sum_along(nm.mul(prod, prod), axis=None)

    loss = loss_tensor()
    backward(loss)
    for p in (a, b):
        fd = central_diff(lambda: float(loss_tensor().data), p.data)
        assert max_rel_err(p.grad, fd) < 1e-6


def test_softmax_symmetric():
    out = softmax_masked(Tensor([0.0, 0.0]))
    np.testing.assert_allclose(out.data, [0.5, 0.5], atol=1e-15)


def test_softmax_single_survivor():
    out = softmax_masked(Tensor([5.0, 100.0]), np.array([True, False]))
    np.testing.assert_array_equal(out.data, [1.0, 0.0])


def test_softmax_matches_direct_formula():
    x = np.array([1.0, 2.0, 3.0])
    out = softmax_masked(Tensor(x))
    np.testing.assert_allclose(out.data, softmax_direct(x), atol=1e-12)


def test_softmax_fully_masked_row_errors():
    with pytest.raises(NumericsError, match="fully masked"):
        softmax_masked(Tensor([[1.0, 2.0], [3.0, 4.0]]), np.array([[True, True], [False, False]]))


def test_softmax_rows_sum_to_one_and_masked_exactly_zero():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(6, 9)) * 10
    mask = rng.random((6, 9)) > 0.4
    mask[:, 0] = True
    out = softmax_masked(Tensor(x), mask).data
    np.testing.assert_allclose(out.sum(axis=-1), np.ones(6), atol=1e-12)
    assert (out[~mask] == 0.0).all()


def test_softmax_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    x = Parameter(rng.normal(size=(3, 5)), "x")
    mask = rng.random((3, 5)) > 0.3
    mask[:, 2] = True
    coeff = rng.normal(size=(3, 5))

    def loss_tensor():
        return nm.sum_along(nm.mul(softmax_masked(x, mask), coeff), axis=None)

    backward(loss_tensor())
    fd = central_diff(lambda: float(loss_tensor().data), x.data)
    assert max_rel_err(x.grad, fd) < 1e-6


def test_layer_norm_constant_row_collapses_to_bias():
    x = Tensor(np.full((2, 4), 7.0))
    gain = Parameter(np.ones(4), "g")
    bias = Parameter(np.zeros(4), "b")
    out = layer_norm(x, gain, bias)
    np.testing.assert_allclose(out.data, np.zeros((2, 4)), atol=1e-6)


def test_layer_norm_zero_gain_gives_bias():
    x = Tensor(np.random.default_rng(1).normal(size=(3, 4)))
    out = layer_norm(x, Parameter(np.zeros(4), "g"), Parameter(np.full(4, 2.5), "b"))
    np.testing.assert_allclose(out.data, np.full((3, 4), 2.5), atol=1e-12)


def test_layer_norm_gradients_match_finite_differences():
    rng = np.random.default_rng(5)
    x = Parameter(rng.normal(size=(4, 6)), "x")
    gain = Parameter(rng.normal(size=6), "g")
    bias = Parameter(rng.normal(size=6), "b")
    coeff = rng.normal(size=(4, 6))

    def loss_tensor():
        return nm.sum_along(nm.mul(layer_norm(x, gain, bias), coeff), axis=None)

    backward(loss_tensor())
    for p in (x, gain, bias):
        fd = central_diff(lambda: float(loss_tensor().data), p.data)
        assert max_rel_err(p.grad, fd) < 1e-5


def test_gelu_zero_and_asymptote():
    assert gelu(Tensor([0.0])).data[0] == 0.0
    big = gelu(Tensor([12.0])).data[0]
    assert abs(big - 12.0) < 1e-6


def test_gelu_gradient_matches_finite_differences():
    x = Parameter(np.linspace(-3, 3, 13), "x")

    def loss_tensor():
        return nm.sum_along(gelu(x), axis=None)

    backward(loss_tensor())
    fd = central_diff(lambda: float(loss_tensor().data), x.data)
    assert max_rel_err(x.grad, fd) < 1e-6


def test_cross_entropy_uniform_logits():
    loss = cross_entropy(Tensor(np.zeros((3, 4))), np.array([0, 1, 3]))
    assert abs(float(loss.data) - math.log(4)) < 1e-12


def test_cross_entropy_confident_limit():
    logits = np.zeros((1, 5))
    logits[0, 2] = 60.0
    loss = cross_entropy(Tensor(logits), np.array([2]))
    assert float(loss.data) < 1e-12


def test_cross_entropy_matches_direct_oracle():
    rng = np.random.default_rng(6)
    logits = rng.normal(size=(5, 7)) * 3
    targets = rng.integers(0, 7, size=5)
    loss = cross_entropy(Tensor(logits), targets)
    expected = -log_softmax_direct(logits)[np.arange(5), targets].mean()
    assert abs(float(loss.data) - expected) <= 1e-10


def test_cross_entropy_all_ignored_errors():
    with pytest.raises(NumericsError, match="ignored"):
        cross_entropy(Tensor(np.zeros((2, 3))), np.array([9, 9]), ignore_index=9)


def test_cross_entropy_ignore_index_gradient():
    rng = np.random.default_rng(7)
    logits = Parameter(rng.normal(size=(4, 5)), "l")
    targets = np.array([1, 9, 3, 9])

    def loss_tensor():
        return cross_entropy(logits, targets, ignore_index=9)

    backward(loss_tensor())
    assert np.all(logits.grad[1] == 0.0) and np.all(logits.grad[3] == 0.0)
    fd = central_diff(lambda: float(loss_tensor().data), logits.data)
    assert max_rel_err(logits.grad, fd) < 1e-6


def test_bce_with_logits_matches_hand_formula():
    z = np.array([0.3, -1.2, 2.0])
    y = np.array([1.0, 0.0, 1.0])
    loss = binary_cross_entropy_with_logits(Tensor(z), y)
    p = 1 / (1 + np.exp(-z))
    expected = -(y * np.log(p) + (1 - y) * np.log(1 - p)).mean()
    assert abs(float(loss.data) - expected) < 1e-12


def test_backward_sum_gives_ones():
    p = Parameter(np.array([1.0, 2.0, 3.0]), "p")
    backward(nm.sum_along(p, axis=None))
    np.testing.assert_array_equal(p.grad, np.ones(3))


def test_backward_half_square_gives_value():
    v = np.array([0.5, -2.0, 4.0])
    p = Parameter(v, "p")
    backward(nm.mul(nm.sum_along(nm.mul(p, p), axis=None), 0.5))
    np.testing.assert_allclose(p.grad, v, atol=1e-12)


def test_backward_twice_doubles_grads():
    p = Parameter(np.array([1.0, -3.0]), "p")

    def make_loss():
        return nm.sum_along(nm.mul(p, p), axis=None)

    backward(make_loss())
    once = p.grad.copy()
    backward(make_loss())
    np.testing.assert_array_equal(p.grad, 2.0 * once)


def test_backward_rejects_non_scalar():
    p = Parameter(np.ones((2, 2)), "p")
    with pytest.raises(NumericsError, match="scalar"):
        backward(nm.mul(p, 2.0))


def test_backward_shared_node_accumulates():
    p = Parameter(np.array([2.0]), "p")
    doubled = nm.mul(p, 3.0)
    backward(nm.sum_along(nm.add(doubled, doubled), axis=None))
    np.testing.assert_array_equal(p.grad, [6.0])


def test_detach_blocks_gradient():
    p = Parameter(np.array([2.0]), "p")
    backward(nm.sum_along(nm.mul(nm.mul(p, 2.0).detach(), p), axis=None))
    np.testing.assert_array_equal(p.grad, [4.0])


def test_finite_check_raises_on_overflow():
    with np.errstate(over="ignore"), pytest.raises(NumericsError, match="non-finite"):
        nm.mul(Tensor([1e308]), Tensor([1e308]))


def test_ops_stay_finite_on_documented_ranges():
    rng = np.random.default_rng(8)
    x = Tensor(rng.normal(size=(4, 8)) * 50)
    softmax_masked(x)
    gelu(x)
    layer_norm(x, Parameter(np.ones(8), "g"), Parameter(np.zeros(8), "b"))
    cross_entropy(Tensor(rng.normal(size=(4, 9)) * 80), rng.integers(0, 9, size=4))


def test_embedding_gather_and_scatter_grad():
    table = Parameter(np.arange(12.0).reshape(4, 3), "emb")
    ids = np.array([[0, 2], [2, 2]])
    out = nm.embedding(table, ids)
    np.testing.assert_array_equal(out.data[0, 1], table.data[2])
    backward(nm.sum_along(out, axis=None))
    np.testing.assert_array_equal(table.grad[:, 0], [1.0, 0.0, 3.0, 0.0])
