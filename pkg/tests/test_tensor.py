import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from varytoy import tensor as T
from varytoy.tensor import DimensionError, NumericError, Tensor, precision, rel_error

from helpers import gradcheck
from oracles import conv_sliding, cross_entropy_explicit, matmul_loops


def p64(rng, *shape):
    return T.parameter(rng.standard_normal(shape))


# --- matmul ---------------------------------------------------------------


def test_matmul_identity_returns_other_operand():
    b = np.arange(6.0).reshape(3, 2)
    assert np.array_equal(T.matmul(Tensor(np.eye(3)), Tensor(b)).data, b.astype(np.float32))
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(T.matmul(Tensor(a), Tensor(np.eye(2))).data, a)


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(0)
    with precision(np.float64):
        a, b = rng.standard_normal((4, 5)), rng.standard_normal((5, 3))
        out = T.matmul(Tensor(a), Tensor(b)).data
    assert np.abs(out - matmul_loops(a.tolist(), b.tolist())).max() < 1e-6


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


def test_matmul_gradients():
    rng = np.random.default_rng(1)
    with precision(np.float64):
        a, b = p64(rng, 4, 5), p64(rng, 5, 3)
        gradcheck(lambda: (T.matmul(a, b) * T.matmul(a, b)).sum(), [a, b], rng)


# --- elementwise ----------------------------------------------------------


def test_gelu_zero_and_known_values():
    assert T.gelu(Tensor(np.zeros(3))).data.tolist() == [0.0, 0.0, 0.0]
    with precision(np.float64):
        x = T.parameter(np.array([0.5]))
        y = T.gelu(x)
        y.sum().backward()
    # tanh-approximation GELU evaluated in plain Python
    assert y.data[0] == pytest.approx(0.34571400982514394, rel=1e-12)
    assert x.grad[0] == pytest.approx(0.8673699034844606, rel=1e-3)


def test_add_zero_identity_and_bias_broadcast():
    x = np.random.default_rng(2).standard_normal((3, 4)).astype(np.float32)
    assert np.array_equal(T.add(Tensor(x), T.zeros(3, 4)).data, x)
    bias = np.arange(4.0, dtype=np.float32)
    assert np.array_equal((Tensor(x) + Tensor(bias)).data, x + bias)


def test_incompatible_broadcast_rejected():
    with pytest.raises(DimensionError):
        Tensor(np.zeros((3, 4))) + Tensor(np.zeros(3))
    with pytest.raises(DimensionError):
        Tensor(np.zeros((3, 4))) * Tensor(np.zeros((4, 4)))


@pytest.mark.parametrize("op", ["add", "mul", "gelu", "tanh", "sub"])
def test_elementwise_gradcheck(op):
    rng = np.random.default_rng(3)
    with precision(np.float64):
        a, b = p64(rng, 3, 4), p64(rng, 4)
        fns = {
            "add": lambda: ((a + b) * (a + b)).sum(),
            "mul": lambda: ((a * b) * a).sum(),
            "gelu": lambda: (T.gelu(a) * T.gelu(a)).sum(),
            "tanh": lambda: (T.tanh(a) * a).sum(),
            "sub": lambda: ((a - b) * (a - b)).sum(),
        }
        gradcheck(fns[op], [a, b] if op not in ("gelu", "tanh") else [a], rng, n=12)


# --- layer norm -----------------------------------------------------------


def test_layer_norm_constant_row_gives_bias():
    bias = np.array([0.5, -1.0, 2.0, 0.0])
    out = T.layer_norm(Tensor(np.full((2, 4), 3.0)), T.ones(4), Tensor(bias)).data
    assert np.allclose(out, bias[None], atol=1e-6)


def test_layer_norm_standardizes_rows():
    x = np.random.default_rng(4).standard_normal((5, 16)) * 3 + 2
    with precision(np.float64):
        out = T.layer_norm(Tensor(x), T.ones(16), T.zeros(16)).data
    assert np.abs(out.mean(-1)).max() < 1e-6
    assert np.abs(out.var(-1) - 1).max() < 1e-3


def test_layer_norm_dimension_mismatch():
    with pytest.raises(DimensionError):
        T.layer_norm(Tensor(np.zeros((2, 4))), T.ones(3), T.zeros(3))


def test_layer_norm_gradcheck():
    rng = np.random.default_rng(5)
    with precision(np.float64):
        x, g, b = p64(rng, 3, 6), p64(rng, 6), p64(rng, 6)
        w = rng.standard_normal((3, 6))
        gradcheck(lambda: (T.layer_norm(x, g, b) * Tensor(w)).sum(), [x, g, b], rng, n=18)


# --- softmax / cross-entropy ----------------------------------------------


def test_uniform_logits_give_log_v():
    loss = T.softmax_cross_entropy(T.zeros(3, 4), np.array([0, 3, 1]), np.ones(3, bool))
    assert loss.item() == pytest.approx(math.log(4), abs=1e-6)


def test_confident_correct_logit_gives_zero_loss():
    logits = np.zeros((2, 5))
    logits[0, 2] = logits[1, 4] = 1000.0
    loss = T.softmax_cross_entropy(Tensor(logits), np.array([2, 4]), np.ones(2, bool))
    assert loss.item() == pytest.approx(0.0, abs=1e-6)


def test_cross_entropy_matches_explicit_probabilities():
    rng = np.random.default_rng(6)
    logits = rng.standard_normal((3, 5))
    targets = np.array([1, 4, 0])
    mask = np.array([True, False, True])
    ref_loss, ref_grad, probs = cross_entropy_explicit(logits, targets, mask)
    with precision(np.float64):
        x = T.parameter(logits.copy())
        loss = T.softmax_cross_entropy(x, targets, mask)
        loss.backward()
    assert abs(loss.item() - ref_loss) / ref_loss < 1e-6
    assert rel_error(x.grad, ref_grad, floor=1e-12).max() < 1e-6
    assert np.abs(probs.sum(-1) - 1).max() < 1e-6


def test_cross_entropy_errors():
    with pytest.raises(ValueError):
        T.softmax_cross_entropy(T.zeros(2, 3), np.array([0, 1]), np.zeros(2, bool))
    with pytest.raises(IndexError):
        T.softmax_cross_entropy(T.zeros(2, 3), np.array([0, 3]), np.ones(2, bool))
    with pytest.raises(NumericError):
        T.softmax_cross_entropy(Tensor(np.full((1, 3), np.nan)), np.array([0]), np.ones(1, bool))


def test_softmax_rows_sum_to_one_and_mask_blocks():
    x = np.random.default_rng(7).standard_normal((2, 4, 4))
    mask = np.triu(np.full((4, 4), -np.inf), 1)
    with precision(np.float64):
        p = T.softmax(Tensor(x), mask).data
    assert np.abs(p.sum(-1) - 1).max() < 1e-6
    assert np.all(p[..., np.triu_indices(4, 1)[0], np.triu_indices(4, 1)[1]] == 0)


def test_softmax_and_cross_entropy_gradcheck():
    rng = np.random.default_rng(8)
    with precision(np.float64):
        x = p64(rng, 4, 6)
        w = rng.standard_normal((4, 6))
        gradcheck(lambda: (T.softmax(x) * Tensor(w)).sum(), [x], rng)
        t = rng.integers(0, 6, 4)
        gradcheck(lambda: T.softmax_cross_entropy(x, t, np.ones(4, bool)), [x], rng)


# --- conv2d ---------------------------------------------------------------


def test_conv_identity_kernel():
    x = np.random.default_rng(9).standard_normal((3, 5, 5)).astype(np.float32)
    k = np.zeros((3, 3, 1, 1), np.float32)
    k[range(3), range(3)] = 1.0
    assert np.array_equal(T.conv2d(Tensor(x), Tensor(k)).data, x)


def test_conv_average_on_constant_image():
    x = np.full((1, 8, 8), 4.0)
    out = T.conv2d(Tensor(x), Tensor(np.full((1, 1, 2, 2), 0.25)), stride=2).data
    assert out.shape == (1, 4, 4) and np.all(out == 4.0)


@pytest.mark.parametrize("stride", [1, 2])
def test_conv_matches_sliding_window(stride):
    rng = np.random.default_rng(10)
    x, k = rng.standard_normal((2, 8, 8)), rng.standard_normal((3, 2, 2, 2))
    with precision(np.float64):
        out = T.conv2d(Tensor(x), Tensor(k), stride=stride).data
    assert np.abs(out - conv_sliding(x, k, stride)).max() < 1e-6


def test_conv_non_integral_output_rejected():
    with pytest.raises(ValueError, match="integral"):
        T.conv2d(Tensor(np.zeros((1, 7, 7))), Tensor(np.zeros((1, 1, 2, 2))), stride=2)


@pytest.mark.parametrize("k,stride", [(2, 2), (3, 1)])
def test_conv_gradcheck(k, stride):
    rng = np.random.default_rng(11)
    with precision(np.float64):
        x, w, b = p64(rng, 2, 6, 6), p64(rng, 3, 2, k, k), p64(rng, 3)
        gradcheck(lambda: (T.conv2d(x, w, stride, b) * T.conv2d(x, w, stride, b)).sum(), [x, w, b], rng)


# --- structural ops -------------------------------------------------------


def test_structural_ops_gradcheck():
    rng = np.random.default_rng(12)
    with precision(np.float64):
        a, b = p64(rng, 3, 4), p64(rng, 2, 4)
        idx = np.array([0, 4, 2, 2, 1])
        w = rng.standard_normal((5, 4))

        def f():
            c = T.concat([a, b], axis=0)
            r = T.take_rows(c, idx) * Tensor(w)
            s = r.reshape(4, 5).transpose(1, 0)[1:4]
            return (s * s).mean() + T.linear(a, b.transpose(1, 0)).sum()

        gradcheck(f, [a, b], rng)


def test_backward_simple_functionals_and_accumulation():
    x = T.parameter(np.array([1.0, -2.0, 3.0]))
    x.sum().backward()
    assert x.grad.tolist() == [1.0, 1.0, 1.0]
    x.zero_grad()
    (x * x).sum().backward()
    assert x.grad.tolist() == [2.0, -4.0, 6.0]
    (x * x).sum().backward()
    assert x.grad.tolist() == [4.0, -8.0, 12.0]


def test_backward_requires_scalar():
    x = T.parameter(np.ones(3))
    with pytest.raises(DimensionError):
        (x * x).backward()


def test_no_grad_records_nothing():
    x = T.parameter(np.ones(3))
    with T.no_grad():
        y = x * x
    assert not y.requires_grad


def test_forward_backward_is_deterministic():
    def run():
        rng = np.random.default_rng(13)
        a, b = T.parameter(rng.standard_normal((6, 5))), T.parameter(rng.standard_normal((5, 4)))
        loss = T.softmax_cross_entropy(T.gelu(T.matmul(a, b)), np.array([0, 1, 2, 3, 0, 1]), np.ones(6, bool))
        loss.backward()
        return loss.data.tobytes(), a.grad.tobytes(), b.grad.tobytes()

    assert run() == run()


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=2, min_side=1, max_side=5),
                  elements=st.floats(-5, 5)))
def test_property_sum_of_squares_gradient(x):
    with precision(np.float64):
        t = T.parameter(x.copy())
        (t * t).sum().backward()
    assert np.allclose(t.grad, 2 * x)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(2, 7), st.integers(0, 2**31))
def test_property_softmax_rows_normalized(n, v, seed):
    x = np.random.default_rng(seed).standard_normal((n, v)) * 10
    with precision(np.float64):
        p = T.softmax(Tensor(x)).data
    assert np.all(p >= 0) and np.abs(p.sum(-1) - 1).max() < 1e-6
