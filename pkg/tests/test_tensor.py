import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from blockamd import tensor as tn
from blockamd.tensor import ShapeError, Tensor
from gradcheck import check_gradients, primitive_cases


def leaf(x):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


# ---------------------------------------------------------------- forward values

def test_softmax_of_equal_logits_is_uniform():
    np.testing.assert_array_equal(tn.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])


def test_softmax_masked_key_gets_zero_weight():
    out = tn.softmax(Tensor([3.0, 5.0]), np.array([0.0, -np.inf]))
    np.testing.assert_array_equal(out.data, [1.0, 0.0])


def test_matmul_identity():
    m = [[1.0, 2.0], [3.0, 4.0]]
    np.testing.assert_array_equal(tn.matmul(Tensor(np.eye(2)), Tensor(m)).data, m)


def test_fully_masked_row_is_uniform_with_zero_grad():
    x = leaf(np.random.default_rng(0).normal(size=(2, 3)))
    mask = np.array([[0.0, -np.inf, 0.0], [-np.inf, -np.inf, -np.inf]])
    out = tn.softmax(x, mask)
    np.testing.assert_allclose(out.data[1], np.full(3, 1 / 3))
    tn.backward(tn.reduce_sum(tn.mul(out, Tensor([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]))))
    np.testing.assert_array_equal(x.grad[1], 0.0)
    assert np.all(np.isfinite(x.grad))


def test_layer_norm_normalizes_last_axis():
    x = Tensor(np.random.default_rng(1).normal(3.0, 2.0, size=(4, 8)))
    out = tn.layer_norm(x, Tensor(np.ones(8)), Tensor(np.zeros(8))).data
    np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=-1), 1.0, rtol=1e-4)


def test_gelu_reference_points():
    out = tn.gelu(Tensor([0.0, 1.0, -1.0])).data
    c = np.sqrt(2 / np.pi)
    expect = [0.5 * v * (1 + np.tanh(c * (v + 0.044715 * v ** 3))) for v in (0.0, 1.0, -1.0)]
    np.testing.assert_allclose(out, expect, rtol=1e-15)


def test_concat_slice_embedding_values():
    a, b = Tensor(np.zeros((2, 1))), Tensor(np.ones((2, 2)))
    np.testing.assert_array_equal(tn.concat([a, b], axis=1).data, [[0, 1, 1], [0, 1, 1]])
    x = Tensor(np.arange(12.0).reshape(3, 4))
    np.testing.assert_array_equal(tn.slice_(x, (slice(1, 3), 2)).data, [6.0, 10.0])
    table = Tensor(np.arange(6.0).reshape(3, 2))
    np.testing.assert_array_equal(tn.embedding(table, [2, 0]).data, [[4, 5], [0, 1]])


# ---------------------------------------------------------------- contracts

def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4,\)"):
        tn.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros(4)))


def test_only_leading_batch_broadcasting():
    tn.add(Tensor(np.zeros((5, 2, 3))), Tensor(np.zeros((2, 3))))
    with pytest.raises(ShapeError):
        tn.mul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 1))))
    with pytest.raises(ShapeError):
        tn.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_backward_requires_scalar_root():
    with pytest.raises(ShapeError):
        tn.backward(tn.exp(leaf([1.0, 2.0])))


def test_embedding_rejects_out_of_range_ids():
    with pytest.raises(ShapeError):
        tn.embedding(leaf(np.zeros((3, 2))), [3])


# ---------------------------------------------------------------- gradients

def test_sum_of_softmax_has_zero_gradient():
    x = leaf(np.random.default_rng(2).normal(size=(3, 4)))
    tn.backward(tn.reduce_sum(tn.softmax(x)))
    np.testing.assert_allclose(x.grad, 0.0, atol=1e-15)


def test_square_gradient():
    x = leaf([1.0, 2.0, 3.0])
    tn.backward(tn.reduce_sum(tn.mul(x, x)))
    np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])


def test_shared_subgraph_visited_once():
    x = leaf([0.5, -1.0])
    y = tn.exp(x)
    root = tn.reduce_sum(tn.add(y, y))  # y feeds the root twice
    tn.backward(root)
    np.testing.assert_allclose(x.grad, 2 * np.exp(x.data))


def test_five_node_graph_matches_finite_differences():
    rng = np.random.default_rng(3)
    a, b = leaf(rng.normal(size=(2, 3))), leaf(rng.normal(size=(3, 2)))

    def fn(a, b):
        h = tn.matmul(a, b)               # 1
        s = tn.softmax(h)                 # 2
        l = tn.log(tn.add(s, Tensor(1)))  # 3, 4
        return tn.reduce_mean(l)          # 5

    assert check_gradients(fn, [a, b], eps=1e-5) < 1e-4


@pytest.mark.parametrize("seed", range(20))
def test_every_primitive_matches_finite_differences(seed):
    for name, (fn, inputs) in primitive_cases(np.random.default_rng(seed)).items():
        err = check_gradients(fn, inputs)
        assert err < 1e-4, (name, err)


def test_grads_accumulate_across_backward_calls():
    x = leaf([1.0, 2.0])
    tn.backward(tn.reduce_sum(tn.mul(x, x)))
    tn.backward(tn.reduce_sum(tn.mul(x, x)))
    np.testing.assert_array_equal(x.grad, [4.0, 8.0])


def test_no_grad_builds_no_graph():
    x = leaf([1.0])
    with tn.no_grad():
        y = tn.exp(x)
    assert not y.requires_grad and y._parents == ()
    assert tn.grad_enabled()


def test_no_grad_is_thread_local():
    seen = {}

    def worker():
        seen["enabled"] = tn.grad_enabled()

    with tn.no_grad():
        t = threading.Thread(target=worker)
        t.start()
        t.join()
    assert seen["enabled"] is True


# ---------------------------------------------------------------- properties

finite = st.floats(-30, 30, allow_nan=False, allow_infinity=False)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=finite))
def test_softmax_rows_are_distributions(x):
    p = tn.softmax(Tensor(x)).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)
    lp = tn.log_softmax(Tensor(x)).data
    np.testing.assert_allclose(np.exp(lp).sum(axis=-1), 1.0, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(1, 5)), elements=finite))
def test_forward_is_deterministic(x):
    a = tn.layer_norm(tn.gelu(Tensor(x)), Tensor(np.ones(x.shape[1])), Tensor(np.zeros(x.shape[1])))
    b = tn.layer_norm(tn.gelu(Tensor(x)), Tensor(np.ones(x.shape[1])), Tensor(np.zeros(x.shape[1])))
    np.testing.assert_array_equal(a.data, b.data)
