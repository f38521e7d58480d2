#!/usr/bin/env python3
"""
Tests for the tensor engine: finite-difference gradients of every op,
FFT and matmul against naive references, and graph error handling.
"""

import numpy as np
import pytest

from gradcheck import check_gradients, numerical_gradient, relative_error
from tensor import (
    DimensionError, GraphError, Tape, Tensor, abs_, add, backward, complex_abs, conv2d, div, exp,
    fft2, gelu, getitem, ifft2, log, log_softmax, matmul, maximum, mean, mul, neg, real, reshape,
    rowwise_l2_norm, scale, softmax, softplus, sqrt, square, stack, sub, sum_, swap_last,
    transpose, upsample_nearest
)

SEEDS = range(20)
TOL = 1e-4


def param(rng, *shape, low=-1.0, high=1.0):
    return Tensor(rng.uniform(low, high, size=shape), requires_grad=True)


def away_from_zero(rng, *shape):
    """Values with |x| >= 0.2 so kinks stay out of finite-difference reach."""
    sign = rng.choice([-1.0, 1.0], size=shape)
    return Tensor(sign * rng.uniform(0.2, 1.0, size=shape), requires_grad=True)


def weighted(out, rng):
    """Scalar sum(out * w) with fixed random weights."""
    w = np.random.default_rng(int(rng.integers(1 << 30))).normal(size=out.shape)
    return sum_(mul(out, Tensor(w)))


def case_add(rng):
    a, b = param(rng, 3, 4), param(rng, 4)
    return lambda: weighted(add(a, b), np.random.default_rng(1)), {'a': a, 'b': b}


def case_sub(rng):
    a, b = param(rng, 2, 3, 4), param(rng, 3, 1)
    return lambda: weighted(sub(a, b), np.random.default_rng(1)), {'a': a, 'b': b}


def case_mul(rng):
    a, b = param(rng, 3, 4), param(rng, 3, 4)
    return lambda: weighted(mul(a, b), np.random.default_rng(1)), {'a': a, 'b': b}


def case_div(rng):
    a, b = param(rng, 3, 4), param(rng, 3, 4, low=0.5, high=2.0)
    return lambda: weighted(div(a, b), np.random.default_rng(1)), {'a': a, 'b': b}


def case_unary(rng):
    a = param(rng, 3, 5)
    p = param(rng, 3, 5, low=0.5, high=2.0)

    def fn():
        weights_rng = np.random.default_rng(1)
        total = weighted(neg(a), weights_rng) + weighted(scale(a, 1.7), weights_rng) + weighted(square(a), weights_rng)
        total = total + weighted(exp(a), weights_rng) + weighted(gelu(a), weights_rng) + weighted(softplus(a), weights_rng)
        return total + weighted(sqrt(p), weights_rng) + weighted(log(p), weights_rng)

    return fn, {'a': a, 'p': p}


def case_kinks(rng):
    a = away_from_zero(rng, 4, 3)
    return lambda: weighted(abs_(a), np.random.default_rng(1)) + weighted(maximum(a, 0.0), np.random.default_rng(2)), {'a': a}


def case_softmax(rng):
    a = param(rng, 2, 5, low=-3.0, high=3.0)

    def fn():
        weights_rng = np.random.default_rng(1)
        return weighted(softmax(a, axis=-1), weights_rng) + weighted(log_softmax(a, axis=0), weights_rng)

    return fn, {'a': a}


def case_shapes(rng):
    a = param(rng, 2, 3, 4)

    def fn():
        weights_rng = np.random.default_rng(1)
        x = reshape(transpose(a, (2, 0, 1)), (4, 6))
        y = swap_last(getitem(a, (slice(None), slice(1, 3))))
        return weighted(x, weights_rng) + weighted(y, weights_rng)

    return fn, {'a': a}


def case_stack_upsample(rng):
    a, b = param(rng, 2, 3, 3), param(rng, 2, 3, 3)
    return lambda: weighted(upsample_nearest(stack([a, b], axis=1), 2), np.random.default_rng(1)), {'a': a, 'b': b}


def case_reductions(rng):
    a = param(rng, 3, 4, 2)

    def fn():
        weights_rng = np.random.default_rng(1)
        return weighted(sum_(a, axis=1), weights_rng) + weighted(mean(a, axis=(0, 2), keepdims=True), weights_rng) + mean(a)

    return fn, {'a': a}


def case_rownorm(rng):
    w = param(rng, 4, 6)
    return lambda: weighted(rowwise_l2_norm(w), np.random.default_rng(1)), {'w': w}


def case_matmul(rng):
    a, b = param(rng, 2, 3, 4), param(rng, 4, 5)
    return lambda: weighted(matmul(a, b), np.random.default_rng(1)), {'a': a, 'b': b}


def case_conv2d(rng):
    x, w = param(rng, 2, 3, 5, 5), param(rng, 4, 3, 3, 3)
    return lambda: weighted(conv2d(x, w, padding=1), np.random.default_rng(1)), {'x': x, 'w': w}


def case_spectral(rng):
    x = param(rng, 2, 4, 4)
    y = param(rng, 2, 4, 4)
    filt = Tensor(rng.normal(size=(4, 4)) + 1j * rng.normal(size=(4, 4)))

    def fn():
        weights_rng = np.random.default_rng(1)
        filtered = ifft2(mul(fft2(x), filt))
        product = mul(fft2(x), fft2(y))
        return weighted(real(filtered), weights_rng) + weighted(complex_abs(product), weights_rng)

    return fn, {'x': x, 'y': y}


CASES = {
    'add': case_add, 'sub': case_sub, 'mul': case_mul, 'div': case_div,
    'unary': case_unary, 'kinks': case_kinks, 'softmax': case_softmax,
    'shapes': case_shapes, 'stack_upsample': case_stack_upsample,
    'reductions': case_reductions, 'rownorm': case_rownorm, 'matmul': case_matmul,
    'conv2d': case_conv2d, 'spectral': case_spectral,
}


@pytest.mark.parametrize('seed', SEEDS)
@pytest.mark.parametrize('name', sorted(CASES))
def test_op_gradients(name, seed):
    fn, params = CASES[name](np.random.default_rng(seed))
    errors = check_gradients(fn, params)
    assert max(errors.values()) < TOL, errors


def test_relative_error_zero_when_both_vanish():
    assert relative_error(np.zeros(3), np.zeros(3)) == 0.0


def test_numerical_gradient_restores_data():
    a = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    before = a.data.copy()
    grad = numerical_gradient(lambda: sum_(square(a)), a)
    np.testing.assert_array_equal(a.data, before)
    np.testing.assert_allclose(grad, 2.0 * before, atol=1e-6)


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(8, 8)), rng.normal(size=(8, 8))
    expected = np.zeros((8, 8))
    for i in range(8):
        for j in range(8):
            for k in range(8):
                expected[i, j] += a[i, k] * b[k, j]
    np.testing.assert_allclose(matmul(Tensor(a), Tensor(b)).data, expected, atol=1e-10)


def naive_dft2(x):
    h, w = x.shape
    out = np.zeros((h, w), dtype=np.complex128)
    for u in range(h):
        for v in range(w):
            for i in range(h):
                for j in range(w):
                    out[u, v] += x[i, j] * np.exp(-2j * np.pi * (u * i / h + v * j / w))
    return out


@pytest.mark.parametrize('shape', [(1, 1), (2, 3), (4, 4), (5, 7), (8, 8), (16, 16)])
def test_fft2_matches_naive_dft(shape):
    x = np.random.default_rng(sum(shape)).normal(size=shape)
    np.testing.assert_allclose(fft2(Tensor(x)).data, naive_dft2(x), atol=1e-9)


@pytest.mark.parametrize('seed', range(5))
def test_fft_roundtrip_and_parseval(seed):
    x = np.random.default_rng(seed).normal(size=(3, 6, 8))
    spectrum = fft2(Tensor(x))
    np.testing.assert_allclose(ifft2(spectrum).data.real, x, atol=1e-12)
    energy = np.sum(np.abs(spectrum.data) ** 2, axis=(-2, -1)) / (6 * 8)
    np.testing.assert_allclose(energy, np.sum(x ** 2, axis=(-2, -1)), rtol=1e-10)


def test_ops_outside_tape_record_nothing():
    a = Tensor(np.ones(3), requires_grad=True)
    out = sum_(square(a))
    assert out._tape is None
    with pytest.raises(GraphError):
        backward(out)


def test_non_scalar_loss_rejected():
    a = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        out = square(a)
    with pytest.raises(GraphError):
        tape.backward(out)


def test_tape_cannot_be_replayed():
    a = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        loss = sum_(square(a))
    tape.backward(loss)
    with pytest.raises(GraphError):
        tape.backward(loss)


def test_loss_from_other_tape_rejected():
    a = Tensor(np.ones(3), requires_grad=True)
    with Tape():
        loss = sum_(a)
    with Tape() as other:
        sum_(square(a))
    with pytest.raises(GraphError):
        other.backward(loss)


def test_complex_leaf_cannot_require_grad():
    with pytest.raises(GraphError):
        Tensor(np.ones(2) + 1j, requires_grad=True)


def test_grads_accumulate_until_cleared():
    a = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    for _ in range(2):
        with Tape() as tape:
            loss = sum_(square(a))
        tape.backward(loss)
    np.testing.assert_allclose(a.grad, 2 * 2.0 * a.data)
    a.zero_grad()
    assert a.grad is None


def test_reused_operand_gradients_sum():
    a = Tensor(np.array([0.5, -1.5]), requires_grad=True)
    with Tape() as tape:
        loss = sum_(mul(a, a) + a)
    tape.backward(loss)
    np.testing.assert_allclose(a.grad, 2.0 * a.data + 1.0)


def test_shape_errors():
    with pytest.raises(DimensionError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(DimensionError):
        add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))
    with pytest.raises(DimensionError):
        reshape(Tensor(np.ones(6)), (4, 2))
    with pytest.raises(DimensionError):
        stack([Tensor(np.ones(2)), Tensor(np.ones(3))])
    with pytest.raises(DimensionError):
        conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))


def test_rowwise_norm_zero_row_has_zero_gradient():
    w = Tensor(np.array([[0.0, 0.0], [3.0, 4.0]]), requires_grad=True)
    with Tape() as tape:
        loss = sum_(rowwise_l2_norm(w))
    tape.backward(loss)
    np.testing.assert_allclose(w.grad, [[0.0, 0.0], [0.6, 0.8]])


if __name__ == '__main__':
    raise SystemExit(pytest.main([__file__, '-q']))
