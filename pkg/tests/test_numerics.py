from __future__ import annotations

import numpy as np
import pytest

from src.errors import NonFiniteError, ShapeError
from src.prism.numerics import (
    ComplexTensor,
    RealTensor,
    circular_convolve_direct,
    complex_elementwise,
    dft_direct,
    fft,
    ifft,
    next_pow2,
    pad_pow2,
    polar,
)


def _random(rng, n: int) -> np.ndarray:
    return rng.normal(size=n) + 1j * rng.normal(size=n)


def test_fft_of_impulse_and_constant():
    np.testing.assert_allclose(fft([1, 0, 0, 0]).to_array(), [1, 1, 1, 1])
    np.testing.assert_allclose(fft([1, 1, 1, 1]).to_array(), [4, 0, 0, 0], atol=1e-15)


def test_fft_matches_direct_dft(rng):
    x = _random(rng, 8)
    err = np.abs(fft(x).to_array() - dft_direct(x).to_array()).max()
    assert err < 1e-12


def test_fft_transforms_rows_independently(rng):
    x = rng.normal(size=(3, 16)) + 1j * rng.normal(size=(3, 16))
    batched = fft(x).to_array()
    for row in range(3):
        np.testing.assert_allclose(batched[row], fft(x[row]).to_array(), atol=1e-13)


def test_ifft_inverts_fft(rng):
    np.testing.assert_allclose(ifft([4, 0, 0, 0]).to_array(), [1, 1, 1, 1])
    x = _random(rng, 32)
    assert np.abs(ifft(fft(x)).to_array() - x).max() < 1e-12


def test_parseval(rng):
    x = _random(rng, 64)
    lhs = np.sum(np.abs(x) ** 2)
    rhs = np.sum(np.abs(fft(x).to_array()) ** 2) / 64
    assert abs(lhs - rhs) / lhs < 1e-12


def test_fft_rejects_non_power_of_two():
    with pytest.raises(ShapeError):
        fft(np.ones(6))


@pytest.mark.parametrize("n, n_pad", [(8, 8), (5, 8), (33, 64), (1, 1)])
def test_pad_pow2_lengths(n, n_pad):
    padded, original = pad_pow2(np.arange(1, n + 1))
    assert padded.shape == (n_pad,)
    assert original == n
    np.testing.assert_array_equal(padded.to_array()[:n], np.arange(1, n + 1))
    np.testing.assert_array_equal(padded.to_array()[n:], 0)


def test_next_pow2_rejects_zero():
    assert next_pow2(1025) == 2048
    with pytest.raises(ValueError):
        next_pow2(0)


def test_circular_convolution_hand_case():
    np.testing.assert_allclose(circular_convolve_direct([1, 2], [3, 4]).to_array(), [11, 10])


def test_circular_convolution_identity_kernel(rng):
    x = _random(rng, 8)
    delta = np.eye(1, 8).ravel()
    np.testing.assert_allclose(circular_convolve_direct(x, delta).to_array(), x)


def test_convolution_theorem(rng):
    x, k = _random(rng, 16), _random(rng, 16)
    via_fft = ifft(complex_elementwise(fft(x), fft(k), "mul")).to_array()
    direct = circular_convolve_direct(x, k).to_array()
    assert np.abs(via_fft - direct).max() < 1e-10


def test_complex_elementwise_ops(rng):
    out = complex_elementwise([1 + 1j], [1 - 1j], "mul").to_array()
    np.testing.assert_allclose(out, [2 + 0j])

    theta, phi = rng.uniform(-1.5, 1.5, size=2)
    z = complex_elementwise([np.exp(1j * theta)], [np.exp(1j * phi)], "conj_mul").to_array()
    assert np.angle(z[0]) == pytest.approx(theta - phi, abs=1e-12)

    x = _random(rng, 4)
    np.testing.assert_array_equal(complex_elementwise(x, np.zeros(4), "add").to_array(), x)

    with pytest.raises(ShapeError):
        complex_elementwise(np.ones(3), np.ones(4), "add")


def test_polar_conventions():
    modulus, phase = polar([3 + 4j, 0j, -1 + 0j, complex(-1.0, -0.0)])
    np.testing.assert_allclose(modulus.data, [5, 0, 1, 1])
    np.testing.assert_allclose(phase.data, [np.arctan2(4, 3), 0.0, np.pi, np.pi])


def test_tensors_reject_non_finite():
    with pytest.raises(NonFiniteError):
        RealTensor(np.array([1.0, np.nan]))
    with pytest.raises(NonFiniteError):
        ComplexTensor(np.zeros(2), np.array([0.0, np.inf]))
    with pytest.raises(ShapeError):
        ComplexTensor(np.zeros(2), np.zeros(3))


@pytest.mark.parametrize("n", [2**k for k in range(11)])
def test_round_trip_up_to_1024(n, rng):
    x = _random(rng, n)
    assert np.abs(ifft(fft(x)).to_array() - x).max() < 1e-12


@pytest.mark.parametrize("n", [8, 16, 32, 64])
def test_fft_matches_direct_dft_at_every_size(n, rng):
    for _ in range(10):
        x = _random(rng, n)
        assert np.abs(fft(x).to_array() - dft_direct(x).to_array()).max() < 1e-10


@pytest.mark.parametrize("n", [8, 16, 32, 64])
def test_convolution_theorem_over_random_pairs(n, rng):
    worst = 0.0
    for _ in range(100):
        x, k = _random(rng, n), _random(rng, n)
        via_fft = ifft(complex_elementwise(fft(x), fft(k), "mul")).to_array()
        worst = max(worst, np.abs(via_fft - circular_convolve_direct(x, k).to_array()).max())
    assert worst < 1e-10


def test_fft_is_linear(rng):
    x, y = _random(rng, 64), _random(rng, 64)
    alpha, beta = 0.7 - 0.2j, -1.3 + 0.4j
    lhs = fft(alpha * x + beta * y).to_array()
    rhs = alpha * fft(x).to_array() + beta * fft(y).to_array()
    np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-12)
