import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from memgat import tensor as T
from memgat.errors import (
    DegenerateBatchError,
    DeterminismError,
    DimensionError,
    OptimizerError,
    ParameterError,
    ShapeError,
    VocabularyError,
)
from memgat.tensor import AdamState, Tensor, adam_step, backward, finite_difference_check


def P(data):
    return Tensor.parameter(data)


def test_matmul_identity_and_hand_product():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(T.matmul(a, Tensor(np.eye(2))).data, a.data)
    np.testing.assert_array_equal(T.matmul(a, Tensor([[1.0], [1.0]])).data, [[3.0], [7.0]])


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_softmax_examples():
    np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    np.testing.assert_allclose(T.softmax(Tensor([0.0, math.log(3.0)])).data, [0.25, 0.75], atol=1e-15)
    out = T.softmax(Tensor([1000.0, 1000.0])).data
    assert np.all(np.isfinite(out))
    np.testing.assert_array_equal(out, [0.5, 0.5])


def test_softmax_invalid_axis():
    with pytest.raises(DimensionError):
        T.softmax(Tensor(np.ones((2, 2))), axis=2)


@settings(max_examples=50, deadline=None)
@given(
    st.lists(st.floats(-50, 50), min_size=1, max_size=8),
    st.floats(-100, 100),
)
def test_softmax_rows_sum_to_one_and_shift_invariant(row, shift):
    x = np.array(row)
    y = T.softmax(Tensor(x)).data
    assert abs(y.sum() - 1.0) < 1e-12
    assert np.all(y >= 0)
    assert np.max(np.abs(T.softmax(Tensor(x + shift)).data - y)) < 1e-12


def test_layer_norm_examples():
    # eps must be positive; 1e-12 stands in for the hand-computed eps=0 case
    out = T.layer_norm(Tensor([1.0, 3.0]), Tensor(1.0), Tensor(0.0), eps=1e-12).data
    np.testing.assert_allclose(out, [-1.0, 1.0], atol=1e-9)
    const = T.layer_norm(Tensor([2.0, 2.0, 2.0]), Tensor(np.ones(3)), Tensor(np.full(3, 5.0)), eps=1e-5).data
    np.testing.assert_allclose(const, 5.0, atol=1e-9)
    x = Tensor(np.random.default_rng(0).normal(size=(3, 4)))
    zero = T.layer_norm(x, Tensor(np.zeros(4)), Tensor(np.arange(4.0)), eps=1e-5).data
    np.testing.assert_array_equal(zero, np.broadcast_to(np.arange(4.0), (3, 4)))


@pytest.mark.parametrize("eps", [0.0, -1e-5])
def test_layer_norm_rejects_nonpositive_eps(eps):
    with pytest.raises(ParameterError):
        T.layer_norm(Tensor([1.0, 3.0]), Tensor(1.0), Tensor(0.0), eps=eps)


def test_embedding_lookup_rows_and_accumulation():
    table = P(np.arange(12.0).reshape(4, 3))
    np.testing.assert_array_equal(T.embedding_lookup(table, [0]).data, [[0.0, 1.0, 2.0]])
    out = T.embedding_lookup(table, [2, 2])
    np.testing.assert_array_equal(out.data, [[6.0, 7.0, 8.0]] * 2)
    backward(out.sum())
    expected = np.zeros((4, 3))
    expected[2] = 2.0
    np.testing.assert_array_equal(table.grad, expected)


def test_embedding_lookup_out_of_range_names_id():
    with pytest.raises(VocabularyError, match="4"):
        T.embedding_lookup(Tensor(np.zeros((4, 2))), [1, 4])


def test_cross_entropy_examples():
    assert T.cross_entropy(Tensor(np.zeros((1, 4))), [2], pad_id=0).item() == pytest.approx(math.log(4), abs=1e-12)
    logits = np.zeros((1, 4))
    logits[0, 1] = 50.0
    assert T.cross_entropy(Tensor(logits), [1], pad_id=0).item() < 1e-6
    two = np.random.default_rng(1).normal(size=(2, 5))
    single = T.cross_entropy(Tensor(two[:1]), [3], pad_id=0).item()
    assert T.cross_entropy(Tensor(two), [3, 0], pad_id=0).item() == pytest.approx(single, abs=1e-15)


def test_cross_entropy_all_padding():
    with pytest.raises(DegenerateBatchError):
        T.cross_entropy(Tensor(np.zeros((2, 4))), [0, 0], pad_id=0)


def test_backward_examples():
    x = P(3.0)
    backward(x * x)
    assert x.grad == pytest.approx(6.0)
    y = P(1.0)
    backward(y + y)
    assert y.grad == pytest.approx(2.0)
    a, unused = P(2.0), P(5.0)
    backward(a * 4.0)
    assert unused.grad is None


def test_backward_rejects_non_scalar():
    x = P(np.ones(3))
    with pytest.raises(ShapeError):
        backward(x * 2.0)


def test_gradients_accumulate_across_calls():
    x = P(2.0)
    backward(x * 3.0)
    backward(x * 3.0)
    assert x.grad == pytest.approx(6.0)


def test_backward_is_linear():
    rng = np.random.default_rng(3)
    w = P(rng.normal(size=(4, 3)))
    x = Tensor(rng.normal(size=(2, 4)))

    def l1():
        return T.softmax(T.matmul(x, w), -1).log().sum()

    def l2():
        return (T.matmul(x, w) ** 2).mean()

    a, b = 0.7, -1.3
    backward(l1())
    g1 = w.grad.copy()
    w.grad = None
    backward(l2())
    g2 = w.grad.copy()
    w.grad = None
    backward(l1() * a + l2() * b)
    assert np.max(np.abs(w.grad - (a * g1 + b * g2))) < 1e-10


def test_each_node_visited_once():
    x = P(np.ones(3))
    y = x * 2.0
    z = (y + y * y).sum()
    nodes = T.graph_nodes(z)
    assert len(nodes) == len({id(n) for n in nodes})
    # topological: every node's inputs (if recorded) appear earlier
    seen = set()
    for node in nodes:
        for inp in node.inputs:
            if inp.node is not None:
                assert id(inp.node) in seen
        seen.add(id(node))


def test_no_grad_records_nothing():
    x = P(np.ones(2))
    with T.no_grad():
        y = x * 2.0
    assert y.node is None and not y.requires_grad


# ---- finite differences on every primitive

RNG = np.random.default_rng(1234)


def _positive(shape):
    return RNG.uniform(0.5, 2.0, size=shape)


PRIMITIVE_CASES = {
    "add": lambda: (lambda a, b: (a + b).sum() * 1.5, [P(RNG.normal(size=(2, 3))), P(RNG.normal(size=(3,)))]),
    "sub": lambda: (lambda a, b: ((a - b) ** 2).sum(), [P(RNG.normal(size=(2, 3))), P(RNG.normal(size=(1, 3)))]),
    "mul": lambda: (lambda a, b: (a * b).sum(), [P(RNG.normal(size=(2, 3))), P(RNG.normal(size=(2, 1)))]),
    "div": lambda: (lambda a, b: (a / b).sum(), [P(RNG.normal(size=(2, 3))), P(_positive((3,)))]),
    "neg": lambda: (lambda a: (-a * a).sum(), [P(RNG.normal(size=(3,)))]),
    "power": lambda: (lambda a: (a**3.0).sum(), [P(RNG.normal(size=(3,)))]),
    "exp": lambda: (lambda a: a.exp().sum(), [P(RNG.normal(size=(2, 2)))]),
    "log": lambda: (lambda a: a.log().sum(), [P(_positive((2, 2)))]),
    "relu": lambda: (lambda a: (a.relu() * a).sum(), [P(np.array([-1.3, -0.4, 0.6, 1.7]))]),
    "sigmoid": lambda: (lambda a: a.sigmoid().sum(), [P(RNG.normal(size=(4,)) * 3)]),
    "clip": lambda: (lambda a: (T.clip(a, -0.5, 0.5) ** 2).sum(), [P(np.array([-0.9, -0.2, 0.3, 0.8]))]),
    "masked_fill": lambda: (
        lambda a: (T.masked_fill(a, np.array([[True, False, True]]), -3.0) ** 2).sum(),
        [P(RNG.normal(size=(2, 3)))],
    ),
    "sum": lambda: (lambda a: (a.sum(axis=1) ** 2).sum(), [P(RNG.normal(size=(2, 3)))]),
    "max": lambda: (lambda a: (a.max(axis=0) ** 2).sum(), [P(np.array([[1.0, -2.0], [0.3, 4.0], [-1.0, 0.5]]))]),
    "reshape": lambda: (lambda a: (a.reshape(3, 2) ** 2 * Tensor(np.arange(6.0).reshape(3, 2))).sum(), [P(RNG.normal(size=(2, 3)))]),
    "transpose": lambda: (lambda a: (a.transpose(1, 0) * Tensor(np.arange(6.0).reshape(3, 2))).sum(), [P(RNG.normal(size=(2, 3)))]),
    "matmul": lambda: (lambda a, b: (T.matmul(a, b) ** 2).sum(), [P(RNG.normal(size=(2, 2, 3))), P(RNG.normal(size=(3, 4)))]),
    "softmax": lambda: (lambda a: (T.softmax(a, -1) * Tensor(np.arange(8.0).reshape(2, 4))).sum(), [P(RNG.normal(size=(2, 4)))]),
    "log_softmax": lambda: (lambda a: (T.log_softmax(a, 0) * Tensor(np.arange(8.0).reshape(2, 4))).sum(), [P(RNG.normal(size=(2, 4)))]),
    "layer_norm": lambda: (
        lambda x, g, b: (T.layer_norm(x, g, b, 1e-5) * Tensor(np.arange(10.0).reshape(2, 5))).sum(),
        [P(RNG.normal(size=(2, 5))), P(RNG.normal(size=(5,))), P(RNG.normal(size=(5,)))],
    ),
    "embedding_lookup": lambda: (
        lambda t: (T.embedding_lookup(t, [[1, 3, 1]]) ** 2).sum(),
        [P(RNG.normal(size=(4, 3)))],
    ),
    "cross_entropy": lambda: (
        lambda z: T.cross_entropy(z, [[2, 0, 4]], pad_id=0),
        [P(RNG.normal(size=(1, 3, 5)))],
    ),
}


def test_every_registered_primitive_has_a_check():
    assert set(T.GRAD_RULES) == set(PRIMITIVE_CASES)


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
def test_primitive_gradient(name):
    fn, params = PRIMITIVE_CASES[name]()
    assert finite_difference_check(lambda: fn(*params), params, eps=1e-5) < 1e-4


def test_fd_quadratic_is_near_exact():
    x = P(np.array([0.3, -1.2, 2.0]))
    assert finite_difference_check(lambda: (x * x * 2.0).sum() + (x * 3.0).sum(), [x], eps=1e-5) < 1e-8


def test_fd_rejects_bad_eps():
    x = P(np.ones(1))
    with pytest.raises(ParameterError):
        finite_difference_check(lambda: (x * x).sum(), [x], eps=1.0)


def test_fd_detects_nondeterminism():
    x = P(np.ones(2))
    rng = np.random.default_rng(0)
    with pytest.raises(DeterminismError):
        finite_difference_check(lambda: (x * rng.normal()).sum(), [x], eps=1e-5)


def test_adam_first_step_moves_by_lr():
    w = P(np.array([1.0, -2.0]))
    w.grad = np.array([0.5, 3.0])
    state = AdamState(lr=0.001)
    adam_step({"w": w}, state)
    np.testing.assert_allclose(w.data, [1.0 - 0.001, -2.0 - 0.001], atol=1e-9)
    assert w.grad is None


def test_adam_zero_grad_and_counter():
    w = P(np.array([1.0, -2.0]))
    state = AdamState(lr=0.01)
    for _ in range(3):
        w.grad = np.zeros(2)
        adam_step({"w": w}, state)
    np.testing.assert_array_equal(w.data, [1.0, -2.0])
    assert state.step == 3
    assert state.first_moment["w"].shape == w.shape


def test_adam_missing_grad_names_parameter():
    with pytest.raises(OptimizerError, match="enc.w"):
        adam_step({"enc.w": P(np.ones(2))}, AdamState())
