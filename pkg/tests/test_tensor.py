import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from miat import tensor as T
from miat.errors import CheckpointError, ConfigError, DimensionError, NumericError, UsageError
from miat.tensor import Tensor

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def small(shape):
    return arrays(np.float64, shape, elements=finite)


def test_add_broadcast_gradient_sums_back():
    a = Tensor(np.ones((3, 4)), requires_grad=True)
    b = Tensor(np.arange(4.0), requires_grad=True)
    (a + b).sum().backward()
    assert np.array_equal(a.grad, np.ones((3, 4)))
    assert np.array_equal(b.grad, np.full(4, 3.0))


def test_mul_div_gradients_hand_values():
    x = Tensor(3.0, requires_grad=True)
    y = Tensor(2.0, requires_grad=True)
    (x * y / (x + y)).backward()
    # f = xy/(x+y): df/dx = y^2/(x+y)^2, df/dy = x^2/(x+y)^2
    assert x.grad == pytest.approx(4 / 25, abs=1e-15)
    assert y.grad == pytest.approx(9 / 25, abs=1e-15)


def test_matmul_matches_numpy_and_gradient_formula():
    rng = np.random.default_rng(0)
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    g = rng.normal(size=(3, 2))
    out = T.matmul(a, b)
    assert np.allclose(out.data, a.data @ b.data, atol=1e-14)
    (out * g).sum().backward()
    assert np.allclose(a.grad, g @ b.data.T, atol=1e-14)
    assert np.allclose(b.grad, a.data.T @ g, atol=1e-14)


def test_batched_matmul_shared_weight_gradient():
    rng = np.random.default_rng(1)
    a = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    w = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    g = rng.normal(size=(2, 3, 5))
    (T.matmul(a, w) * g).sum().backward()
    assert np.allclose(w.grad, np.einsum("bik,bij->kj", a.data, g), atol=1e-13)
    assert np.allclose(a.grad, g @ w.data.T, atol=1e-13)


def test_matmul_shape_errors():
    with pytest.raises(DimensionError):
        T.matmul(np.ones((2, 3)), np.ones((4, 2)))
    with pytest.raises(DimensionError):
        T.matmul(np.ones(3), np.ones((3, 2)))


def test_reused_node_accumulates():
    x = Tensor(2.0, requires_grad=True)
    y = x * x
    (y + y * x).backward()     # x^2 + x^3 -> 2x + 3x^2
    assert x.grad == pytest.approx(16.0)


def test_backward_requires_scalar_and_grad():
    with pytest.raises(UsageError):
        Tensor(np.ones(3), requires_grad=True).backward()
    with pytest.raises(UsageError):
        Tensor(1.0).backward()


def test_unary_forward_values():
    x = np.array([-2.0, -0.5, 0.5, 3.0])
    assert np.allclose(T.relu(x).data, [0, 0, 0.5, 3])
    assert np.allclose(T.sigmoid(x).data, 1 / (1 + np.exp(-x)), atol=1e-15)
    assert np.allclose(T.tanh(x).data, np.tanh(x))
    assert np.allclose(T.exp(x).data, np.exp(x))
    assert np.allclose(T.absolute(x).data, np.abs(x))
    assert np.allclose(T.log(np.abs(x)).data, np.log(np.abs(x)))


def test_log_of_nonpositive_is_numeric_error():
    with pytest.raises(NumericError):
        T.log(np.array([1.0, 0.0]))


def test_non_finite_outputs_are_caught_and_toggleable():
    with pytest.raises(NumericError):
        T.exp(np.array([1000.0]))
    T.set_finite_checks(False)
    try:
        assert np.isinf(T.exp(np.array([1000.0])).data[0])
    finally:
        T.set_finite_checks(True)
    assert T.finite_checks_enabled()


def test_dropout_eval_identity_and_train_scaling():
    x = Tensor(np.ones((200, 50)))
    assert T.dropout(x, 0.3, None) is x
    y = T.dropout(x, 0.25, np.random.default_rng(0)).data
    assert set(np.unique(y)) <= {0.0, 1 / 0.75}
    assert abs(y.mean() - 1.0) < 0.03
    with pytest.raises(ConfigError):
        T.dropout(x, 1.0, None)


def test_softmax_rows_sum_to_one_and_known_value():
    p = T.softmax_rows(np.array([[0.0, np.log(3.0)]])).data
    assert np.allclose(p, [[0.25, 0.75]], atol=1e-15)
    ls = T.log_softmax_rows(np.array([[1.0, 2.0, 3.0]])).data
    assert np.allclose(np.exp(ls).sum(), 1.0, atol=1e-15)


@settings(max_examples=60, deadline=None)
@given(small((3, 5)), st.floats(-50, 50))
def test_softmax_shift_invariance(x, c):
    assert np.allclose(T.softmax(x + c).data, T.softmax(x).data, atol=1e-12)
    assert np.allclose(np.exp(T.log_softmax(x).data).sum(axis=-1), 1.0, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(small((4, 6)))
def test_layer_norm_matches_direct_formula(x):
    gain = np.linspace(0.5, 1.5, 6)
    bias = np.linspace(-1, 1, 6)
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    expect = (x - mu) / np.sqrt(var + 1e-5) * gain + bias
    assert np.allclose(T.layer_norm(x, gain, bias).data, expect, atol=1e-10)


def test_layer_norm_width_mismatch():
    with pytest.raises(DimensionError):
        T.layer_norm(np.ones((2, 3)), np.ones(4), np.zeros(3))


def test_reductions_and_reshape():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    y = T.mean(x, axis=1)
    assert np.allclose(y.data, [1.0, 4.0])
    y.sum().backward()
    assert np.allclose(x.grad, np.full((2, 3), 1 / 3))
    with pytest.raises(DimensionError):
        T.reshape(x, (4, 2))


def test_getitem_fancy_index_accumulates_duplicates():
    x = Tensor(np.arange(5.0), requires_grad=True)
    T.getitem(x, np.array([1, 1, 3])).sum().backward()
    assert np.array_equal(x.grad, [0, 2, 0, 1, 0])


def test_getitem_slice_gradient():
    x = Tensor(np.zeros((3, 4)), requires_grad=True)
    x[1:, ::2].sum().backward()
    expect = np.zeros((3, 4))
    expect[1:, ::2] = 1
    assert np.array_equal(x.grad, expect)


def test_concat_stack_transpose_roundtrip():
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=(2, 3)), rng.normal(size=(2, 1))
    assert np.array_equal(T.concat([a, b], axis=1).data, np.concatenate([a, b], axis=1))
    assert np.array_equal(T.stack([a, a], axis=0).data, np.stack([a, a]))
    x = rng.normal(size=(2, 3, 4))
    assert np.array_equal(T.transpose(x, (2, 0, 1)).data, np.transpose(x, (2, 0, 1)))
    assert np.array_equal(T.transpose(x).data, np.swapaxes(x, -1, -2))


def test_bce_with_logits_matches_direct_formula():
    z = np.array([-3.0, 0.0, 2.0])
    y = np.array([0.0, 1.0, 1.0])
    p = 1 / (1 + np.exp(-z))
    expect = -(y * np.log(p) + (1 - y) * np.log(1 - p))
    assert np.allclose(T.bce_with_logits(z, y).data, expect, atol=1e-14)


def test_broadcast_mismatch_is_dimension_error():
    with pytest.raises(DimensionError):
        T.add(np.ones(3), np.ones(4))


def test_tensor_serialisation_roundtrip():
    rng = np.random.default_rng(3)
    named = [("w", rng.normal(size=(2, 3))), ("scalar", np.array(1.5)), ("ü", np.zeros((0, 2)))]
    buf = io.BytesIO()
    T.write_tensors(buf, named)
    back = T.read_tensors(io.BytesIO(buf.getvalue()))
    assert list(back) == ["w", "scalar", "ü"]
    for name, arr in named:
        assert back[name].shape == arr.shape
        assert np.array_equal(back[name], arr)


def test_tensor_record_layout_is_little_endian():
    buf = io.BytesIO()
    T.write_tensor(buf, "ab", np.array([1.0]))
    raw = buf.getvalue()
    assert raw[:4] == (2).to_bytes(4, "little")
    assert raw[4:6] == b"ab"
    assert raw[6:10] == (1).to_bytes(4, "little")
    assert raw[10:14] == (1).to_bytes(4, "little")
    assert np.frombuffer(raw[14:], "<f8")[0] == 1.0


def test_truncated_tensor_file_raises_checkpoint_error():
    buf = io.BytesIO()
    T.write_tensors(buf, [("w", np.ones((4, 4)))])
    with pytest.raises(CheckpointError):
        T.read_tensors(io.BytesIO(buf.getvalue()[:-5]))
