import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from src.complex_layers import (AvgPool3d, ComplexBatchNorm, ComplexConv3d, ComplexConvTranspose3d, ComplexDropout,
                                ComplexLinear, Concat, CReLU, Flatten, GlobalAvgPool, Sequential, complex_l2_loss,
                                crelu, init_weights, inverse_sqrt_2x2)
from src.exceptions import ShapeMismatchError

from tests.conftest import random_complex

H = 1e-6


def projected_loss(layer, x, r):
    """Real scalar sum Re(conj(r) * layer(x)); its activation gradient is r."""
    return float(np.sum(np.real(np.conj(r) * layer.forward(x))))


def numeric_input_grad(layer, x, r):
    grad = np.zeros_like(x)
    for index in np.ndindex(x.shape):
        for unit in (1.0, 1j):
            plus, minus = x.copy(), x.copy()
            plus[index] += H * unit
            minus[index] -= H * unit
            slope = (projected_loss(layer, plus, r) - projected_loss(layer, minus, r)) / (2 * H)
            grad[index] += slope * unit
    return grad


def numeric_param_grad(layer, name, x, r, model=None):
    param = layer.params[name]
    grad = np.zeros_like(param)
    units = (1.0, 1j) if np.iscomplexobj(param) else (1.0,)
    for index in np.ndindex(param.shape):
        for unit in units:
            original = param[index]
            param[index] = original + H * unit
            plus = projected_loss(model or layer, x, r)
            param[index] = original - H * unit
            minus = projected_loss(model or layer, x, r)
            param[index] = original
            grad[index] += (plus - minus) / (2 * H) * unit
    return grad


def analytic_grads(layer, x, r):
    layer.zero_grad()
    layer.forward(x)
    gx = layer.backward(r)
    return gx, {name: g.copy() for name, g in layer.grads.items()}


def assert_gradients(layer, x, rng, atol=1e-6):
    r = random_complex(rng, layer.forward(x).shape)
    gx, grads = analytic_grads(layer, x, r)
    np.testing.assert_allclose(gx, numeric_input_grad(layer, x, r), atol=atol)
    for name in layer.params:
        np.testing.assert_allclose(grads[name], numeric_param_grad(layer, name, x, r), atol=atol, err_msg=name)


def naive_conv(x, w, b, stride, padding):
    xp = np.pad(x, ((0, 0), (0, 0)) + tuple((p, p) for p in padding))
    out_c, _, k1, k2, k3 = w.shape
    dims = [(xp.shape[2 + i] - w.shape[2 + i]) // stride[i] + 1 for i in range(3)]
    y = np.zeros((x.shape[0], out_c, *dims), dtype=complex)
    for bi in range(x.shape[0]):
        for o in range(out_c):
            for i, j, k in np.ndindex(*dims):
                s = (slice(i * stride[0], i * stride[0] + k1), slice(j * stride[1], j * stride[1] + k2),
                     slice(k * stride[2], k * stride[2] + k3))
                y[bi, o, i, j, k] = np.sum(xp[bi][(slice(None),) + s] * w[o]) + b[o]
    return y


def test_conv_matches_direct_summation(rng):
    layer = init_weights(ComplexConv3d(2, 3, (3, 2, 3), stride=(1, 2, 1), padding=(1, 0, 1)), 0)
    layer.params["bias"][...] = random_complex(rng, 3)
    x = random_complex(rng, (2, 2, 4, 5, 3))
    expected = naive_conv(x, layer.params["weight"], layer.params["bias"], (1, 2, 1), (1, 0, 1))
    np.testing.assert_allclose(layer.forward(x), expected, atol=1e-12)


def test_conv_gradients(rng):
    layer = init_weights(ComplexConv3d(2, 2, 2, stride=(2, 1, 1), padding=(0, 1, 0)), 1)
    assert_gradients(layer, random_complex(rng, (2, 2, 4, 3, 2)), rng)


def test_transposed_conv_is_adjoint_of_conv(rng):
    conv = init_weights(ComplexConv3d(3, 2, 3, stride=2, padding=1), 2)
    up = ComplexConvTranspose3d(2, 3, 3, stride=2, padding=1)
    up.params["weight"][...] = conv.params["weight"]
    x = random_complex(rng, (1, 3, 5, 5, 5))
    y = random_complex(rng, (1, 2, 3, 3, 3))
    assert up.output_shape((2, 3, 3, 3)) == (3, 5, 5, 5)
    lhs = np.sum(conv.forward(x) * y)
    rhs = np.sum(x * up.forward(y))
    assert lhs == pytest.approx(rhs, rel=1e-10)


def test_transposed_conv_gradients(rng):
    layer = init_weights(ComplexConvTranspose3d(2, 2, (2, 3, 2), stride=(2, 1, 1), padding=(0, 1, 0),
                                                output_padding=(1, 0, 0)), 3)
    x = random_complex(rng, (1, 2, 2, 3, 2))
    assert layer.forward(x).shape == (1, 2, 5, 3, 3)
    assert_gradients(layer, x, rng)


def test_conv_rejects_wrong_channels(rng):
    with pytest.raises(ShapeMismatchError):
        ComplexConv3d(2, 2, 1).forward(random_complex(rng, (1, 3, 2, 2, 2)))


def test_inverse_sqrt_matches_eigendecomposition(rng):
    a = rng.standard_normal((5, 2, 2))
    v = a @ np.swapaxes(a, -1, -2) + 0.1 * np.eye(2)
    rr, ri, ii = inverse_sqrt_2x2(v[:, 0, 0], v[:, 0, 1], v[:, 1, 1])
    w = np.stack([np.stack([rr, ri], -1), np.stack([ri, ii], -1)], -2)
    eigval, eigvec = np.linalg.eigh(v)
    expected = eigvec @ (eigvec.swapaxes(-1, -2) / np.sqrt(eigval)[..., :, None])
    np.testing.assert_allclose(w, expected, atol=1e-10)
    np.testing.assert_allclose(w @ v @ w, np.broadcast_to(np.eye(2), v.shape), atol=1e-10)


def test_batchnorm_whitens_in_training(rng):
    layer = ComplexBatchNorm(2)
    raw = random_complex(rng, (64, 2, 3, 2, 2))
    x = (2.0 + 1j) + 3.0 * raw.real + 1j * (raw.real + 0.5 * raw.imag)
    y = layer.forward(x)
    axes = (0, 2, 3, 4)
    np.testing.assert_allclose(y.mean(axis=axes), 0.0, atol=1e-10)
    np.testing.assert_allclose(np.mean(y.real ** 2, axis=axes), 0.5, atol=1e-3)
    np.testing.assert_allclose(np.mean(y.imag ** 2, axis=axes), 0.5, atol=1e-3)
    np.testing.assert_allclose(np.mean(y.real * y.imag, axis=axes), 0.0, atol=1e-3)


def test_batchnorm_eval_uses_running_statistics(rng):
    layer = ComplexBatchNorm(1, momentum=1.0)
    x = 5.0 + random_complex(rng, (16, 1, 2, 2, 2))
    layer.forward(x)
    np.testing.assert_allclose(layer.buffers["running_mean"], x.mean(axis=(0, 2, 3, 4)))
    layer.eval()
    np.testing.assert_allclose(layer.forward(x), layer.train().forward(x), atol=1e-12)


@pytest.mark.parametrize("training", [True, False])
def test_batchnorm_gradients(rng, training):
    layer = ComplexBatchNorm(2)
    layer.params["gamma_ri"][...] = [0.1, -0.2]
    layer.params["beta"][...] = [0.3 - 0.1j, 0.2j]
    x = random_complex(rng, (3, 2, 2, 2, 1)) + 0.5
    if not training:
        layer.forward(random_complex(rng, (8, 2, 2, 2, 1)))
        layer.eval()
    assert_gradients(layer, x, rng, atol=1e-5)


def test_conv_into_whitening_gradients_with_correlated_parts(rng):
    conv = ComplexConv3d(2, 3, (1, 2, 3), padding=(0, 0, 1))
    conv.init_weights(rng)
    norm = ComplexBatchNorm(3)
    norm.params["gamma_ri"][...] = [0.2, -0.1, 0.05]
    model = Sequential(("conv", conv), ("bn", norm))
    base = rng.standard_normal((4, 2, 1, 3, 5))
    x = base + 1j * (0.8 * base + 0.3 * rng.standard_normal(base.shape))
    r = random_complex(rng, model.forward(x).shape)
    gx, _ = analytic_grads(model, x, r)
    np.testing.assert_allclose(gx, numeric_input_grad(model, x, r), atol=1e-5)
    np.testing.assert_allclose(conv.grads["weight"], numeric_param_grad(conv, "weight", x, r, model=model), atol=1e-5)


@settings(max_examples=50, deadline=None)
@given(arrays(np.complex128, (3, 4), elements=st.complex_numbers(max_magnitude=1e3, allow_nan=False,
                                                                  allow_infinity=False)))
def test_crelu_is_idempotent_and_non_negative(x):
    once = crelu(x)
    np.testing.assert_array_equal(crelu(once), once)
    assert np.all(once.real >= 0) and np.all(once.imag >= 0)


def test_crelu_gradient_masks_each_part():
    layer = CReLU()
    layer.forward(np.array([1 - 1j, -1 + 2j]))
    np.testing.assert_array_equal(layer.backward(np.array([3 + 4j, 5 + 6j])), [3 + 0j, 6j])


def test_dropout_behaviour(rng):
    with pytest.raises(ValueError):
        ComplexDropout(1.0)
    layer = ComplexDropout(0.5, seed=0)
    x = np.ones((2000,), dtype=complex)
    y = layer.forward(x)
    assert set(np.unique(y.real)) <= {0.0, 2.0}
    assert y.real.mean() == pytest.approx(1.0, abs=0.1)
    np.testing.assert_array_equal(layer.backward(x), y)
    np.testing.assert_array_equal(layer.eval().forward(x), x)


def test_linear_and_pooling_gradients(rng):
    assert_gradients(init_weights(ComplexLinear(4, 3), 5), random_complex(rng, (2, 4)), rng)
    assert_gradients(AvgPool3d(3), random_complex(rng, (1, 2, 3, 3, 2)), rng)
    assert_gradients(GlobalAvgPool((2, 3)), random_complex(rng, (2, 2, 3, 2, 2)), rng)


def test_composite_gradients(rng):
    net = Sequential(
        ("branches", Concat(("a", ComplexConv3d(1, 2, 1)), ("b", AvgPool3d(3)))),
        ("act", CReLU()),
        ("flat", Flatten()),
        ("fc", ComplexLinear(3 * 8, 2)),
    )
    init_weights(net, 6)
    x = random_complex(rng, (2, 1, 2, 2, 2)) + (3 + 3j)
    assert net.output_shape((1, 2, 2, 2)) == (2,)
    r = random_complex(rng, (2, 2))
    gx, _ = analytic_grads(net, x, r)
    np.testing.assert_allclose(gx, numeric_input_grad(net, x, r), atol=1e-6)


def test_l2_loss_and_gradient():
    pred = np.array([[1 + 1j, 0.0], [2.0, 1j]])
    target = np.zeros((2, 2), dtype=complex)
    loss, grad = complex_l2_loss(pred, target)
    assert loss == pytest.approx((2 + 0 + 4 + 1) / 4)
    np.testing.assert_allclose(grad, pred / 2)
    with pytest.raises(ShapeMismatchError):
        complex_l2_loss(pred, np.zeros(3))


def test_initialization_is_seeded_and_rayleigh():
    first = init_weights(ComplexConv3d(8, 8, 3), 11).params["weight"]
    second = init_weights(ComplexConv3d(8, 8, 3), 11).params["weight"]
    np.testing.assert_array_equal(first, second)
    sigma = 1 / np.sqrt(2 * 8 * 27)
    assert np.mean(np.abs(first) ** 2) == pytest.approx(2 * sigma ** 2, rel=0.1)
