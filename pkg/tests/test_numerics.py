import numpy as np
import pytest
from scipy.special import log_softmax

from core.errors import NumericsError, ShapeError
from core.numerics import (
    Graph,
    add,
    backward,
    check_gradients,
    concat_cols,
    cross_entropy,
    gather_rows,
    matmul,
    mul,
    parameter,
    rmsnorm,
    scale,
    slice_cols,
    softmax_rows,
    sum_all,
    swish,
    take,
    tensor,
    transpose,
)
from core.state import precision


def test_default_dtype_is_float32_and_precision_switches():
    assert tensor([1.0, 2.0]).data.dtype == np.float32
    with precision():
        assert tensor([1.0]).data.dtype == np.float64
    assert tensor([1.0]).data.dtype == np.float32


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        matmul(tensor(np.ones((2, 3))), tensor(np.ones((2, 3))))


def test_backward_needs_scalar():
    with pytest.raises(NumericsError):
        backward(parameter(np.ones((2, 2))))


def test_row_bias_gradient_is_column_sum():
    x = parameter(np.arange(6.0).reshape(2, 3))
    bias = parameter(np.zeros(3))
    backward(sum_all(mul(add(x, bias), tensor(np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])))))
    np.testing.assert_allclose(bias.grad, [5.0, 7.0, 9.0])


def test_gather_rows_accumulates_repeated_ids():
    table = parameter(np.ones((4, 2)))
    backward(sum_all(gather_rows(table, [1, 1, 3])))
    np.testing.assert_array_equal(table.grad, [[0, 0], [2, 2], [0, 0], [1, 1]])


def test_gather_rows_rejects_out_of_range():
    with pytest.raises(ShapeError):
        gather_rows(parameter(np.ones((2, 2))), [2])


def test_leaf_gradients_accumulate_across_backward_calls():
    w = parameter(np.array([[2.0]]))
    backward(sum_all(w))
    backward(sum_all(scale(w, 3.0)))
    np.testing.assert_allclose(w.grad, [[4.0]])


def test_graph_orders_inputs_before_consumers():
    a = parameter(np.ones((2, 2)))
    b = matmul(a, a)
    c = sum_all(b)
    nodes = Graph.from_output(c).nodes
    assert nodes.index(a) < nodes.index(b) < nodes.index(c)


def test_softmax_rows_masks_keys_exactly():
    logits = tensor(np.array([[1.0, 2.0, 3.0], [0.5, -1.0, 4.0]]))
    probs = softmax_rows(logits, key_mask=[True, False, True]).data
    assert np.all(probs[:, 1] == 0.0)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, rtol=1e-6)


def test_softmax_rows_small_examples():
    probs = softmax_rows(tensor(np.full((1, 4), 1.7))).data
    np.testing.assert_allclose(probs, [[0.25, 0.25, 0.25, 0.25]], rtol=1e-6)
    probs = softmax_rows(tensor(np.array([[0.0, 123.0, 0.0]])), key_mask=[True, False, True]).data
    np.testing.assert_allclose(probs, [[0.5, 0.0, 0.5]], rtol=1e-6)
    assert probs[0, 1] == 0.0


def test_softmax_rows_wide_logit_spread_is_stable(rng):
    logits = rng.normal(size=(6, 6)) * 5.0
    logits[:, 0] += 90.0
    logits[:, 5] -= 90.0
    probs = softmax_rows(tensor(logits)).data
    assert np.all(np.isfinite(probs)) and np.all(probs >= 0)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, rtol=1e-5)
    np.testing.assert_array_equal(np.argmax(probs, axis=1), 0)
    huge = softmax_rows(tensor(np.array([[1000.0, 0.0, -1000.0]]))).data
    np.testing.assert_allclose(huge, [[1.0, 0.0, 0.0]], atol=1e-12)


def test_softmax_rows_all_masked():
    with pytest.raises(NumericsError):
        softmax_rows(tensor(np.zeros((2, 2))), key_mask=[False, False])


def test_cross_entropy_value_and_ignore_index():
    raw = np.array([[1.0, 2.0, 0.5], [0.0, 0.0, 3.0], [2.0, 1.0, 1.0]])
    with precision():
        loss = cross_entropy(tensor(raw), [2, -100, 0]).item()
    expected = -(log_softmax(raw[0])[2] + log_softmax(raw[2])[0]) / 2
    assert loss == pytest.approx(expected, rel=1e-12)


def test_cross_entropy_all_ignored():
    with pytest.raises(NumericsError):
        cross_entropy(tensor(np.zeros((2, 3))), [-100, -100])


def test_rmsnorm_zero_vector_is_finite():
    out = rmsnorm(tensor(np.zeros((2, 4))), tensor(np.ones(4)))
    assert np.all(np.isfinite(out.data))
    assert np.all(out.data == 0.0)


def test_slice_and_concat_are_inverse():
    x = tensor(np.arange(12.0).reshape(3, 4))
    joined = concat_cols([slice_cols(x, 0, 1), slice_cols(x, 1, 4)])
    np.testing.assert_array_equal(joined.data, x.data)


def test_take_gradient_scatters_back():
    x = parameter(np.zeros((2, 3)))
    backward(sum_all(take(x, np.array([[0, 5], [5, 1]]))))
    np.testing.assert_array_equal(x.grad, [[1, 1, 0], [0, 0, 2]])


def test_ops_match_finite_differences(rng):
    with precision():
        params = {
            "a": parameter(rng.normal(size=(3, 4)), name="a"),
            "b": parameter(rng.normal(size=(4, 5)), name="b"),
            "gain": parameter(rng.normal(size=5) + 1.0, name="gain"),
            "bias": parameter(rng.normal(size=5), name="bias"),
        }
        labels = [1, 4, 0]
        mask = [True, True, False, True, True]

        def loss_fn():
            h = rmsnorm(add(matmul(params["a"], params["b"]), params["bias"]), params["gain"])
            h = mul(swish(h), softmax_rows(h, key_mask=mask))
            h = add(h, transpose(matmul(transpose(params["b"]), transpose(params["a"]))))
            return cross_entropy(h, labels)

        report = check_gradients(loss_fn, params, coords=20, rng=np.random.default_rng(0))
    assert report.passed(1e-4), report.worst


def test_matmul_matches_triple_loop(rng):
    a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))
    expected = np.array([[sum(a[i, k] * b[k, j] for k in range(5)) for j in range(3)] for i in range(4)])
    with precision():
        np.testing.assert_allclose(matmul(tensor(a), tensor(b)).data, expected, rtol=1e-6)


def test_swish_values():
    out = swish(tensor(np.array([[-1.0, 0.0, 20.0]]))).data[0]
    assert out[0] == pytest.approx(-0.26894, abs=1e-5)
    assert out[1] == 0.0
    assert out[2] == pytest.approx(20.0, abs=1e-6)


def test_half_squared_norm_gradient_is_input(rng):
    values = rng.normal(size=(3, 2))
    x = parameter(values)
    backward(scale(sum_all(mul(x, x)), 0.5))
    np.testing.assert_allclose(x.grad, values, rtol=1e-6)
