from __future__ import annotations

import math

import numpy as np
import pytest
from scipy.special import expit, softmax

from src.errors import ShapeError
from src.prism import layers as L
from src.prism.autodiff import Tape
from src.prism.numerics import circular_convolve_direct, ifft_array


def _complex(rng, *shape) -> np.ndarray:
    return rng.normal(size=shape) + 1j * rng.normal(size=shape)


def test_harmonic_frequency_endpoints():
    omega = L.harmonic_frequencies(16)
    assert omega[0] == 1.0
    assert omega[-1] == pytest.approx(1e-4, rel=1e-12)
    assert np.all(np.diff(omega) < 0)


def test_harmonic_embedding_phase_structure(rng):
    table = L.HarmonicEmbeddingTable.create("embed", 10, 8, rng)
    table.amplitudes.value = np.abs(table.amplitudes.value) + 0.1
    tokens = rng.integers(0, 10, size=13)
    h = L.harmonic_embed(tokens, table, Tape(grad_enabled=False)).value
    amps = table.amplitudes.value[tokens]

    np.testing.assert_array_equal(h[0].real, amps[0])
    np.testing.assert_array_equal(h[0].imag, 0.0)
    np.testing.assert_allclose(np.abs(h), amps, rtol=1e-12)

    delta = 3
    expected = np.exp(-1j * table.frequencies * delta)
    for t in (0, 5, 9):
        rel = h[t] * np.conj(h[t + delta])
        np.testing.assert_allclose(rel / np.abs(rel), expected, atol=1e-12)


@pytest.mark.parametrize(
    "z, b, expected",
    [(3 + 4j, -2.0, 1.8 + 2.4j), (1 + 0j, 0.0, 1 + 0j), (0.5j, -1.0, 0j), (0j, 1.0, 0j)],
)
def test_modrelu_values(z, b, expected):
    params = L.ModReLUParams.create("act", 1)
    params.b.value[:] = b
    out = L.modrelu(np.array([z]), params).value
    np.testing.assert_allclose(out, [expected], atol=1e-15)


def test_spectral_gate_initial_state(rng):
    params = L.SpectralGateParams.create("gate", 4, rng)
    np.testing.assert_array_equal(params.g.value, 2.0)

    params.w_gate.value[:] = 0.0
    z = _complex(rng, 5, 4)
    out = L.spectral_gate(z, params).value
    np.testing.assert_allclose(out, expit(2.0) * z, rtol=1e-12)
    assert expit(2.0) == pytest.approx(0.880797, abs=1e-6)

    params.g.value[:] = 60.0
    np.testing.assert_allclose(L.spectral_gate(z, params).value, z, rtol=1e-12)
    np.testing.assert_array_equal(L.spectral_gate(np.zeros((5, 4), complex), params).value, 0.0)


def test_ghc_identity_kernel(rng):
    kernel = L.GlobalKernel.create("k", 4, 16, rng)
    kernel.k.value = np.ones((4, 16), dtype=complex)
    x = _complex(rng, 10, 4)
    np.testing.assert_allclose(L.ghc_forward(x, kernel).value, x, atol=1e-12)


def test_ghc_matches_time_domain_convolution(rng):
    kernel = L.GlobalKernel.create("k", 3, 8, rng)
    x = _complex(rng, 8, 3)
    y = L.ghc_forward(x, kernel).value
    taps = ifft_array(kernel.k.value)
    for j in range(3):
        ref = circular_convolve_direct(x[:, j], taps[j]).to_array()
        assert np.abs(y[:, j] - ref).max() < 1e-10


def test_ghc_is_linear(rng):
    kernel = L.GlobalKernel.create("k", 4, 16, rng)
    x1, x2 = _complex(rng, 12, 4), _complex(rng, 12, 4)
    a, b = 0.7 - 0.2j, -1.3
    lhs = L.ghc_forward(a * x1 + b * x2, kernel).value
    rhs = a * L.ghc_forward(x1, kernel).value + b * L.ghc_forward(x2, kernel).value
    assert np.abs(lhs - rhs).max() < 1e-10


def test_ghc_ignores_rows_past_valid_length(rng):
    kernel = L.GlobalKernel.create("k", 4, 8, rng)
    x = _complex(rng, 2, 6, 4)
    lengths = np.array([3, 6])
    clean = x.copy()
    clean[0, 3:] = 0.0
    masked = L.ghc_forward(x, kernel, valid_len=lengths).value
    np.testing.assert_allclose(masked, L.ghc_forward(clean, kernel).value, atol=1e-12)


def test_ghc_rejects_sequences_longer_than_kernel(rng):
    kernel = L.GlobalKernel.create("k", 4, 8, rng)
    with pytest.raises(ShapeError):
        L.ghc_forward(_complex(rng, 9, 4), kernel)
    with pytest.raises(ShapeError):
        L.GlobalKernel.create("k", 4, 12, rng)


def test_attention_single_position(rng):
    params = L.AttentionParams.create("attn", 8, 2, rng)
    x = rng.normal(size=(1, 8))
    out = L.mhsa_forward(x, params).value
    expected = x @ params.w_v.value @ params.w_o.value
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_attention_rows_are_stochastic(rng):
    params = L.AttentionParams.create("attn", 8, 4, rng)
    x = rng.normal(size=(7, 8))
    for mask in ("none", "causal"):
        weights = L.attention_weights(x, params, mask)
        assert np.abs(weights.sum(axis=-1) - 1.0).max() < 1e-12
    causal = L.attention_weights(x, params, "causal")
    assert np.all(np.triu(causal[0], k=1) == 0.0)


def test_attention_hand_case():
    params = L.AttentionParams.create("attn", 2, 1, np.random.default_rng(0))
    for p in params.parameters():
        p.value = np.eye(2)
    x = np.array([[1.0, 0.0], [1.0, 1.0]])
    weights = L.attention_weights(x, params)[0]
    scores = x @ x.T / math.sqrt(2.0)
    np.testing.assert_allclose(weights, softmax(scores, axis=-1), atol=1e-15)
    out = L.mhsa_forward(x, params).value
    np.testing.assert_allclose(out, weights @ x, atol=1e-15)


def test_attention_rejects_indivisible_heads(rng):
    with pytest.raises(ShapeError):
        L.AttentionParams.create("attn", 6, 4, rng)


def test_kaiming_bound_holds(rng):
    params = L.AttentionParams.create("attn", 16, 4, rng)
    bound = L.kaiming_bound(16)
    assert bound == pytest.approx(math.sqrt(6.0 / 16) * math.sqrt(1.0 / 6.0))
    for p in params.parameters():
        assert np.abs(p.value).max() <= bound


def test_bridge_recovers_real_part(rng):
    params = L.BridgeParams.create("bridge", 4, rng, use_bias=False)
    params.weight.value = np.vstack([np.eye(4), np.zeros((4, 4))])
    z = rng.normal(size=(5, 4)) + 0j
    np.testing.assert_allclose(L.bridge(z, params).value, z.real)
    np.testing.assert_array_equal(L.bridge(np.zeros((5, 4), complex), params).value, 0.0)

    with_bias = L.BridgeParams.create("bridge", 4, rng)
    out = L.bridge(np.zeros((2, 4), complex), with_bias).value
    np.testing.assert_array_equal(out, np.broadcast_to(with_bias.bias.value, (2, 4)))


@pytest.mark.parametrize("delta", [1, 3, 7])
@pytest.mark.parametrize("t", range(10))
def test_relative_phase_depends_only_on_offset(delta, t, rng):
    table = L.HarmonicEmbeddingTable.create("embed", 6, 8, rng)
    table.amplitudes.value = np.abs(table.amplitudes.value) + 0.1
    tokens = rng.integers(0, 6, size=20)
    h = L.harmonic_embed(tokens, table, Tape(grad_enabled=False)).value
    rel = h[t] * np.conj(h[t + delta])
    anchor = h[0] * np.conj(h[delta])
    assert np.abs(rel / np.abs(rel) - anchor / np.abs(anchor)).max() < 1e-10


def test_ghc_commutes_with_circular_shift(rng):
    kernel = L.GlobalKernel.create("k", 4, 16, rng)
    x = _complex(rng, 16, 4)
    for shift in (1, 5, 11):
        shifted_in = L.ghc_forward(np.roll(x, shift, axis=0), kernel).value
        shifted_out = np.roll(L.ghc_forward(x, kernel).value, shift, axis=0)
        np.testing.assert_allclose(shifted_in, shifted_out, rtol=0, atol=1e-10)


def test_spectral_gate_never_amplifies(rng):
    params = L.SpectralGateParams.create("gate", 6, rng)
    params.w_gate.value = rng.normal(scale=3.0, size=params.w_gate.shape)
    params.g.value = rng.normal(scale=3.0, size=params.g.shape)
    z = _complex(rng, 500, 6) * 10.0
    out = L.spectral_gate(z, params).value
    assert np.all(np.abs(out) <= np.abs(z) * (1 + 1e-12))


def test_spectral_gate_keeps_phase(rng):
    params = L.SpectralGateParams.create("gate", 4, rng)
    params.w_gate.value = rng.normal(size=params.w_gate.shape)
    z = _complex(rng, 25_000, 4)
    out = L.spectral_gate(z, params).value
    live = np.abs(out) > 0
    assert live.sum() > 0.99 * z.size
    assert np.abs(np.angle(out[live] * np.conj(z[live]))).max() < 1e-9


def test_modrelu_keeps_phase(rng):
    params = L.ModReLUParams.create("act", 4)
    params.b.value = rng.normal(size=4)
    z = _complex(rng, 25_000, 4)
    out = L.modrelu(z, params).value
    live = np.abs(out) > 0
    assert np.abs(np.angle(out[live] * np.conj(z[live]))).max() < 1e-9
