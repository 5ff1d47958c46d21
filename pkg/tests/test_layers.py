import numpy as np
import pytest

from areaser import layers as L
from areaser.errors import ContractError, DimensionError, InputError

from oracles import conv2d_naive


def test_same_padding_puts_extra_last():
    assert L.same_padding((2, 10)) == ((0, 1), (4, 5))
    assert L.same_padding((3, 3)) == ((1, 1), (1, 1))
    assert L.normalize_padding(2) == ((2, 2), (2, 2))


@pytest.mark.parametrize("kernel", [(3, 3), (2, 10), (10, 2)])
def test_conv_matches_direct_loop(rng, kernel):
    x = rng.standard_normal((2, 3, 12, 14))
    w = rng.standard_normal((4, 3) + kernel)
    b = rng.standard_normal(4)
    pad = L.same_padding(kernel)
    out, _ = L.conv2d_forward(x, w, b, 1, pad)
    assert out.shape == (2, 4, 12, 14)
    np.testing.assert_allclose(out, conv2d_naive(x, w, b, pad), rtol=1e-10, atol=1e-10)


def test_conv_errors(rng):
    with pytest.raises(DimensionError):
        L.conv2d_forward(rng.standard_normal((1, 2, 5, 5)), rng.standard_normal((3, 4, 3, 3)), np.zeros(3))
    with pytest.raises(DimensionError):
        L.conv2d_forward(rng.standard_normal((2, 5, 5)), rng.standard_normal((3, 2, 3, 3)), np.zeros(3))


def test_batchnorm_training_statistics(rng):
    x = rng.standard_normal((4, 3, 5, 5)) * 3 + 2
    rm, rv = np.zeros(3), np.ones(3)
    out, _ = L.batchnorm_forward(x, np.ones(3), np.zeros(3), rm, rv, training=True)
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1, rtol=1e-4)
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3), ddof=1))


def test_batchnorm_eval_uses_running_stats(rng):
    x = rng.standard_normal((2, 2, 3, 3))
    rm, rv = np.array([1.0, -1.0]), np.array([4.0, 0.25])
    out, _ = L.batchnorm_forward(x, np.ones(2), np.zeros(2), rm, rv, training=False, eps=0.0)
    np.testing.assert_allclose(out[:, 0], (x[:, 0] - 1) / 2)
    np.testing.assert_allclose(out[:, 1], (x[:, 1] + 1) / 0.5)


def test_batchnorm_single_value_training():
    with pytest.raises(InputError):
        L.batchnorm_forward(np.ones((1, 2, 1, 1)), np.ones(2), np.zeros(2), np.zeros(2), np.ones(2), True)


def test_maxpool_drops_trailing_and_ties_first():
    x = np.array([[[[1, 1, 0], [1, 1, 0], [9, 9, 9]]]], dtype=float)
    out, cache = L.maxpool2d_forward(x)
    assert out.shape == (1, 1, 1, 1) and out[0, 0, 0, 0] == 1
    dx = L.maxpool2d_backward(np.ones_like(out), cache)
    assert dx[0, 0].tolist() == [[1, 0, 0], [0, 0, 0], [0, 0, 0]]
    with pytest.raises(DimensionError):
        L.maxpool2d_forward(np.ones((1, 1, 1, 4)))


def test_softmax_and_cross_entropy_values():
    z = np.array([[0.0, 0.0, np.log(2.0)], [1000.0, 0.0, 0.0]])
    p = L.softmax(z)
    np.testing.assert_allclose(p[0], [0.25, 0.25, 0.5])
    np.testing.assert_allclose(p[1], [1, 0, 0])
    loss, d = L.cross_entropy(z, np.array([2, 0]))
    assert loss == pytest.approx(-np.log(0.5) / 2)
    np.testing.assert_allclose(d[0], [0.125, 0.125, -0.25])
    with pytest.raises(InputError):
        L.cross_entropy(z, np.array([3, 0]))
    with pytest.raises(DimensionError):
        L.softmax(np.zeros((2, 0)))


def test_linear_layout(rng):
    x, w, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2)), rng.standard_normal(2)
    np.testing.assert_allclose(L.linear_forward(x, w, b), x @ w + b)
    with pytest.raises(DimensionError):
        L.linear_forward(x, w.T, b)


def test_layer_backward_before_forward():
    conv = L.Conv2d(1, 2, 3, padding=1, dtype=np.float64)
    with pytest.raises(ContractError):
        conv.backward(np.zeros((1, 2, 4, 4)))


def test_conv_block_shapes(rng):
    blk = L.ConvBlock(2, 3, (3, 3), L.same_padding((3, 3)), pool=True, rng=rng, dtype=np.float64)
    y = blk.forward(rng.standard_normal((2, 2, 6, 7)))
    assert y.shape == (2, 3, 3, 3)
    assert blk.backward(np.ones_like(y)).shape == (2, 2, 6, 7)
