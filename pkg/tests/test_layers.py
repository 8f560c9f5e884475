import math

import numpy as np
import pytest

from penletters.autodiff import Tensor, backward, finite_diff_check
from penletters.exceptions import ShapeError
from penletters.functional import (
    batch_norm1d,
    conv1d,
    conv_output_length,
    cross_entropy,
    linear,
    max_pool1d,
    pool_output_length,
)
from penletters.layers import LSTM, BatchNorm1d, Conv1d, ExpLayer, Linear, MaxPool1d


def t(a, **kw):
    return Tensor(np.asarray(a, dtype=np.float64), **kw)


# -- conv1d


def test_conv_length_formula():
    assert conv_output_length(256, 11, 2, 5) == 128


def test_conv_by_hand(f64):
    out = conv1d(t([[[1, 2, 3]]]), t([[[1, 0, -1]]]), t([0.0]))
    np.testing.assert_array_equal(out.numpy(), [[[-2.0]]])


def test_conv_delta_kernel_is_identity(f64):
    x = np.random.default_rng(0).normal(size=(2, 1, 9))
    k = np.zeros((1, 1, 5))
    k[0, 0, 2] = 1
    np.testing.assert_array_equal(conv1d(t(x), t(k), padding=2).numpy(), x)


def test_conv_stride_and_padding_against_loop(f64):
    rng = np.random.default_rng(1)
    x, w, b = rng.normal(size=(2, 3, 13)), rng.normal(size=(4, 3, 5)), rng.normal(size=4)
    out = conv1d(t(x), t(w), t(b), stride=2, padding=2).numpy()
    xp = np.pad(x, ((0, 0), (0, 0), (2, 2)))
    ref = np.array([[[np.sum(xp[n, :, 2 * j : 2 * j + 5] * w[o]) + b[o] for j in range(out.shape[2])]
                     for o in range(4)] for n in range(2)])
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_conv_errors():
    with pytest.raises(ShapeError):
        conv1d(t(np.ones((1, 2, 5))), t(np.ones((1, 3, 3))))
    with pytest.raises(ShapeError):
        conv1d(t(np.ones((1, 1, 3))), t(np.ones((1, 1, 5))))
    with pytest.raises(ValueError):
        Conv1d(1, 1, 3, padding=3)


@pytest.mark.parametrize("stride,padding", [(1, 0), (2, 5), (3, 1)])
def test_conv_gradients(f64, stride, padding):
    rng = np.random.default_rng(stride)
    x, w, b = rng.normal(size=(2, 2, 14)), rng.normal(size=(3, 2, 11 if padding == 5 else 3)), rng.normal(size=3)
    r = rng.normal(size=(2, 3, conv_output_length(14, w.shape[2], stride, padding)))
    f_x = lambda v: (conv1d(v, t(w), t(b), stride, padding) * t(r)).sum()
    f_w = lambda v: (conv1d(t(x), v, t(b), stride, padding) * t(r)).sum()
    assert finite_diff_check(f_x, t(x)) < 1e-6
    assert finite_diff_check(f_w, t(w)) < 1e-6


# -- max pool


def test_pool_length_formula():
    assert pool_output_length(128, 7, 3) == 41
    assert pool_output_length(41, 7, 3) == 12


def test_pool_by_hand():
    out = max_pool1d(t([[[3, 1, 4, 1, 5, 9, 2, 6, 5]]]), 7, 3)
    np.testing.assert_array_equal(out.numpy(), [[[9.0]]])


def test_pool_input_too_short():
    with pytest.raises(ShapeError):
        MaxPool1d(7, 3)(t(np.ones((1, 1, 6))))


def test_pool_gradient_routes_to_argmax(f64):
    x = t([[[1, 5, 2, 5, 0]]], requires_grad=True)
    backward(max_pool1d(x, 3, 2).sum())
    # windows [1,5,2] and [2,5,0]; ties go to the first maximum
    np.testing.assert_array_equal(x.grad, [[[0, 1, 0, 1, 0]]])


# -- batch norm


def test_batch_norm_by_hand(f64):
    x = t([[[1.0]], [[3.0]]])
    out = batch_norm1d(x, t([1.0]), t([0.0]), np.zeros(1), np.ones(1), training=True)
    expected = 1 / math.sqrt(1 + 1e-5)
    np.testing.assert_allclose(out.numpy().ravel(), [-expected, expected], rtol=1e-12)


def test_batch_norm_zero_gamma_gives_beta(f64):
    x = t(np.random.default_rng(0).normal(size=(4, 2, 5)))
    out = batch_norm1d(x, t([0.0, 0.0]), t([0.5, -1.0]), np.zeros(2), np.ones(2), training=True)
    np.testing.assert_array_equal(out.numpy()[:, 0], 0.5)
    np.testing.assert_array_equal(out.numpy()[:, 1], -1.0)


def test_batch_norm_eval_with_unit_stats(f64):
    bn = BatchNorm1d(3).eval()
    x = np.random.default_rng(0).normal(size=(2, 3, 4))
    np.testing.assert_allclose(bn(t(x)).numpy(), x / math.sqrt(1 + 1e-5), rtol=1e-12)


def test_batch_norm_running_update(f64):
    bn = BatchNorm1d(1)
    bn(t([[[1.0, 3.0]], [[5.0, 7.0]]]))
    # batch mean 4, unbiased variance 20/3
    np.testing.assert_allclose(bn.running_mean, [0.4])
    np.testing.assert_allclose(bn.running_var, [0.9 + 0.1 * 20 / 3])
    assert (bn.running_var >= 0).all()


def test_batch_norm_single_element_in_training():
    with pytest.raises(ValueError):
        BatchNorm1d(1)(t([[[2.0]]]))


def test_batch_norm_gradients(f64):
    rng = np.random.default_rng(4)
    x, r = rng.normal(size=(3, 2, 4)), rng.normal(size=(3, 2, 4))
    g, b = rng.normal(size=2), rng.normal(size=2)
    run = lambda xx, gg: (batch_norm1d(xx, gg, t(b), np.zeros(2), np.ones(2), True) * t(r)).sum()
    assert finite_diff_check(lambda v: run(v, t(g)), t(x)) < 1e-6
    assert finite_diff_check(lambda v: run(t(x), v), t(g)) < 1e-6


# -- exp layer


def test_exp_layer_values(f64):
    np.testing.assert_allclose(ExpLayer()(t([0.0, 1.0, -1.0])).numpy(), [0, math.e - 1, 1 - math.e])
    v = t([-3.0, 0.25, 8.0])
    np.testing.assert_allclose(ExpLayer()(v.log1p_signed()).numpy(), v.numpy(), rtol=1e-13)
    np.testing.assert_allclose(ExpLayer("plain")(t([0.0])).numpy(), [1.0])
    with pytest.raises(ValueError):
        ExpLayer("odd")


# -- LSTM


def test_lstm_zero_weights_give_zero_output(f64):
    lstm = LSTM(3, 4, forget_bias=0.0)
    for p in lstm.parameters():
        p.data[:] = 0
    out = lstm(t(np.random.default_rng(0).normal(size=(2, 5, 3))))
    np.testing.assert_array_equal(out.numpy(), 0.0)


def test_lstm_single_step_by_hand(f64):
    lstm = LSTM(1, 1, forget_bias=0.0)
    lstm.weight_ih.data[:] = [[0.5], [-0.25], [1.0], [2.0]]
    lstm.weight_hh.data[:] = 0
    # i = sigmoid(0.5), g = tanh(1), c = i*g, h = sigmoid(2) * tanh(c)
    out = lstm(t([[[1.0]]])).item()
    assert out == pytest.approx(0.3888498844368542, abs=1e-14)


def test_lstm_two_steps_against_reference(f64):
    rng = np.random.default_rng(5)
    lstm = LSTM(2, 3, rng)
    x = rng.normal(size=(2, 4, 2))
    W, U = lstm.weight_ih.numpy(), lstm.weight_hh.numpy()
    b = lstm.bias_ih.numpy() + lstm.bias_hh.numpy()
    sig = lambda z: 1 / (1 + np.exp(-z))
    h = c = np.zeros((2, 3))
    for step in range(4):
        z = x[:, step] @ W.T + h @ U.T + b
        i, f, g, o = sig(z[:, :3]), sig(z[:, 3:6]), np.tanh(z[:, 6:9]), sig(z[:, 9:])
        c = f * c + i * g
        h = o * np.tanh(c)
    np.testing.assert_allclose(lstm(t(x)).numpy(), h, atol=1e-13)


def test_lstm_forget_bias_init():
    lstm = LSTM(2, 3)
    np.testing.assert_array_equal(lstm.bias_ih.numpy(), [0, 0, 0, 1, 1, 1, 0, 0, 0, 0, 0, 0])
    np.testing.assert_array_equal(lstm.bias_hh.numpy(), 0)


def test_lstm_batch_independence(f64):
    lstm = LSTM(2, 3, np.random.default_rng(6))
    x = np.random.default_rng(7).normal(size=(3, 5, 2))
    joint = lstm(t(x)).numpy()
    for n in range(3):
        np.testing.assert_allclose(lstm(t(x[n : n + 1])).numpy()[0], joint[n], atol=1e-15)


def test_lstm_feature_mismatch():
    with pytest.raises(ShapeError):
        LSTM(2, 3)(t(np.ones((1, 4, 5))))


def test_lstm_gradients(f64):
    rng = np.random.default_rng(8)
    lstm = LSTM(2, 3, rng)
    x = rng.normal(size=(2, 3, 2))
    assert finite_diff_check(lambda v: lstm(v).sum(), t(x)) < 1e-6


# -- linear and loss


def test_linear_matches_matmul(f64):
    rng = np.random.default_rng(9)
    x, w, b = rng.normal(size=(4, 3)), rng.normal(size=(2, 3)), rng.normal(size=2)
    np.testing.assert_allclose(linear(t(x), t(w), t(b)).numpy(), x @ w.T + b)
    with pytest.raises(ShapeError):
        Linear(5, 2)(t(x))


def test_cross_entropy_uniform(f64):
    assert cross_entropy(t(np.zeros((3, 52))), [0, 5, 51]).item() == pytest.approx(3.9512437185814275, abs=1e-12)


def test_cross_entropy_confident(f64):
    logits = np.zeros((1, 52))
    logits[0, 7] = 100
    assert cross_entropy(t(logits), [7]).item() < 1e-40


def test_cross_entropy_target_range():
    with pytest.raises(ValueError):
        cross_entropy(t(np.zeros((1, 52))), [52])


def test_cross_entropy_gradient(f64):
    rng = np.random.default_rng(10)
    assert finite_diff_check(lambda v: cross_entropy(v, [1, 0, 3]), t(rng.normal(size=(3, 4)))) < 1e-7
