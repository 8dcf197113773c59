"""Слои энкодеров: гармоническое вложение, ModReLU, спектральный гейт,
глобальная свёртка через БПФ и внимание.

Прямые функции принимают ``Node`` с ленты или обычный массив (он кладётся на
``tape``, а без неё на новую ленту) и возвращают ``Node``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Iterator, Literal

import numpy as np

from ..errors import ShapeError
from . import autodiff as ad
from .autodiff import Node, Parameter, Tape
from .numerics import ComplexTensor, fft_array, is_pow2

MASK_FILL = -1e9
KAIMING_A = math.sqrt(5.0)


# -- инициализация ---------------------------------------------------------


def kaiming_bound(fan_in: int, a: float = KAIMING_A) -> float:
    gain = math.sqrt(2.0 / (1.0 + a * a))
    return gain * math.sqrt(3.0 / fan_in)


def kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, a: float = KAIMING_A) -> np.ndarray:
    bound = kaiming_bound(fan_in, a)
    return rng.uniform(-bound, bound, size=shape)


def complex_kaiming_uniform(
    rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, a: float = KAIMING_A
) -> np.ndarray:
    # Re и Im вместе дают дисперсию одного вещественного элемента
    bound = kaiming_bound(fan_in, a) / math.sqrt(2.0)
    re = rng.uniform(-bound, bound, size=shape)
    im = rng.uniform(-bound, bound, size=shape)
    return re + 1j * im


def harmonic_frequencies(d: int, omega_max: float = 1.0, ratio: float = 1e-4) -> np.ndarray:
    """omega_j = omega_max * ratio^(j / (d - 1)), строго убывают."""
    if d == 1:
        return np.array([omega_max])
    return omega_max * ratio ** (np.arange(d) / (d - 1))


# -- группы параметров -----------------------------------------------------


class ParamGroup:
    def parameters(self) -> Iterator[Parameter]:
        for f in fields(self):  # type: ignore[arg-type]
            value = getattr(self, f.name)
            for item in value if isinstance(value, (list, tuple)) else (value,):
                if isinstance(item, Parameter):
                    yield item
                elif isinstance(item, ParamGroup):
                    yield from item.parameters()


@dataclass
class HarmonicEmbeddingTable(ParamGroup):
    amplitudes: Parameter
    frequencies: np.ndarray

    @classmethod
    def create(cls, name: str, vocab: int, d: int, rng: np.random.Generator, std: float = 0.02):
        amps = Parameter(f"{name}.amplitudes", rng.normal(0.0, std, size=(vocab, d)))
        return cls(amps, harmonic_frequencies(d))


@dataclass
class ModReLUParams(ParamGroup):
    b: Parameter

    @classmethod
    def create(cls, name: str, d: int):
        return cls(Parameter(f"{name}.b", np.zeros(d)))


@dataclass
class SpectralGateParams(ParamGroup):
    w_gate: Parameter
    g: Parameter

    @classmethod
    def create(cls, name: str, d: int, rng: np.random.Generator, bias: float = 2.0):
        w = Parameter(f"{name}.w_gate", kaiming_uniform(rng, (2 * d, d), 2 * d), decay=True)
        return cls(w, Parameter(f"{name}.g", np.full(d, bias)))


@dataclass
class GlobalKernel(ParamGroup):
    k: Parameter

    @property
    def l_pad(self) -> int:
        return self.k.shape[-1]

    @classmethod
    def create(cls, name: str, d: int, l_pad: int, rng: np.random.Generator, noise: float = 0.02):
        if not is_pow2(l_pad):
            raise ShapeError(f"kernel length must be a power of two, got {l_pad}")
        taps = rng.normal(0.0, noise, size=(d, l_pad))
        taps[:, 0] = 1.0
        return cls(Parameter(f"{name}.k", fft_array(taps + 0j), decay=True))


@dataclass
class AttentionParams(ParamGroup):
    w_q: Parameter
    w_k: Parameter
    w_v: Parameter
    w_o: Parameter
    heads: int

    @classmethod
    def create(cls, name: str, d: int, heads: int, rng: np.random.Generator):
        if d % heads:
            raise ShapeError(f"d_model {d} is not divisible by {heads} heads")

        def w(tag: str) -> Parameter:
            return Parameter(f"{name}.{tag}", kaiming_uniform(rng, (d, d), d), decay=True)

        return cls(w("w_q"), w("w_k"), w("w_v"), w("w_o"), heads)


@dataclass
class LayerNormParams(ParamGroup):
    gain: Parameter
    bias: Parameter

    @classmethod
    def create(cls, name: str, d: int):
        return cls(Parameter(f"{name}.gain", np.ones(d)), Parameter(f"{name}.bias", np.zeros(d)))


@dataclass
class FeedForwardParams(ParamGroup):
    w1: Parameter
    b1: Parameter
    w2: Parameter
    b2: Parameter

    @classmethod
    def create(cls, name: str, d: int, d_ff: int, rng: np.random.Generator):
        return cls(
            Parameter(f"{name}.w1", kaiming_uniform(rng, (d, d_ff), d), decay=True),
            Parameter(f"{name}.b1", rng.uniform(-1 / math.sqrt(d), 1 / math.sqrt(d), size=d_ff)),
            Parameter(f"{name}.w2", kaiming_uniform(rng, (d_ff, d), d_ff), decay=True),
            Parameter(f"{name}.b2", rng.uniform(-1 / math.sqrt(d_ff), 1 / math.sqrt(d_ff), size=d)),
        )


@dataclass
class ComplexFeedForwardParams(ParamGroup):
    w1: Parameter
    act: ModReLUParams
    w2: Parameter

    @classmethod
    def create(cls, name: str, d: int, d_ff: int, rng: np.random.Generator):
        return cls(
            Parameter(f"{name}.w1", complex_kaiming_uniform(rng, (d, d_ff), d), decay=True),
            ModReLUParams.create(f"{name}.act", d_ff),
            Parameter(f"{name}.w2", complex_kaiming_uniform(rng, (d_ff, d), d_ff), decay=True),
        )


@dataclass
class BridgeParams(ParamGroup):
    weight: Parameter
    bias: Parameter | None = None

    @classmethod
    def create(cls, name: str, d: int, rng: np.random.Generator, use_bias: bool = True):
        weight = Parameter(f"{name}.weight", kaiming_uniform(rng, (2 * d, d), 2 * d), decay=True)
        bias = None
        if use_bias:
            bound = 1 / math.sqrt(2 * d)
            bias = Parameter(f"{name}.bias", rng.uniform(-bound, bound, size=d))
        return cls(weight, bias)


# -- прямой проход ---------------------------------------------------------


def _bind(x, tape: Tape | None) -> Node:
    if isinstance(x, Node):
        return x
    if isinstance(x, ComplexTensor):
        x = x.to_array()
    return (tape or Tape()).constant(np.asarray(x))


def _swap_last(ndim: int) -> list[int]:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return axes


def harmonic_embed(tokens, table: HarmonicEmbeddingTable, tape: Tape | None = None) -> Node:
    """H[t, j] = A[token_t, j] * (cos(omega_j t) + i sin(omega_j t))."""
    tape = tape or Tape()
    tokens = np.asarray(tokens, dtype=np.intp)
    angle = np.outer(np.arange(tokens.shape[-1]), table.frequencies)
    phasor = np.cos(angle) + 1j * np.sin(angle)
    amps = ad.gather_rows(tape.param(table.amplitudes), tokens)
    return ad.mul(amps, phasor)


def modrelu(z, params: ModReLUParams, tape: Tape | None = None) -> Node:
    z = _bind(z, tape)
    return ad.modrelu(z, z.tape.param(params.b))


def spectral_gate(z, params: SpectralGateParams, tape: Tape | None = None) -> Node:
    """z * sigmoid([Re z || Im z] W_gate + g): вещественный гейт на каждый элемент."""
    z = _bind(z, tape)
    tape = z.tape
    if z.shape[-1] * 2 != params.w_gate.shape[0]:
        raise ShapeError(f"gate expects {params.w_gate.shape[0] // 2} channels, got {z.shape[-1]}")
    feats = ad.concat([ad.real(z), ad.imag(z)], axis=-1)
    gate = ad.sigmoid(ad.add(ad.matmul(feats, tape.param(params.w_gate)), tape.param(params.g)))
    return ad.mul(z, gate)


def ghc_forward(x, kernel: GlobalKernel, valid_len=None, tape: Tape | None = None) -> Node:
    """По каналам: дополнить нулями до L_pad, умножить спектр на K, оставить N строк.

    ``x`` имеет форму ``[..., N, d]``. ``valid_len`` (число или по числу на
    элемент батча) обнуляет строки начиная с этой позиции до преобразования.
    """
    x = _bind(x, tape)
    tape = x.tape
    n, l_pad = x.shape[-2], kernel.l_pad
    if n > l_pad:
        raise ShapeError(f"sequence length {n} exceeds kernel length {l_pad}")
    if valid_len is not None:
        lengths = np.asarray(valid_len)
        keep = np.arange(n) < lengths[..., None]
        x = ad.mul(x, keep[..., None].astype(np.float64))
    axes = _swap_last(len(x.shape))
    cols = ad.transpose(x, axes)
    widths = [(0, 0)] * (len(x.shape) - 1) + [(0, l_pad - n)]
    spectrum = ad.fft(ad.pad(cols, widths))
    mixed = ad.ifft(ad.mul(spectrum, tape.param(kernel.k)))
    crop = tuple([slice(None)] * (len(x.shape) - 1) + [slice(0, n)])
    return ad.transpose(ad.index(mixed, crop), axes)


def _heads(x: Node, heads: int) -> Node:
    *lead, n, d = x.shape
    split = ad.reshape(x, (*lead, n, heads, d // heads))
    k = len(lead)
    return ad.transpose(split, (*range(k), k + 1, k, k + 2))


def _merge(x: Node) -> Node:
    *lead, h, n, dh = x.shape
    k = len(lead)
    joined = ad.transpose(x, (*range(k), k + 1, k, k + 2))
    return ad.reshape(joined, (*lead, n, h * dh))


def attention_bias(n_q: int, n_k: int, causal: bool, key_mask=None) -> np.ndarray:
    bias = np.zeros((n_q, n_k))
    if causal:
        bias = np.where(np.arange(n_k)[None, :] > np.arange(n_q)[:, None], MASK_FILL, 0.0)
    if key_mask is not None:
        km = np.asarray(key_mask, dtype=bool)
        bias = bias + np.where(km, 0.0, MASK_FILL)[..., None, None, :]
    return bias


def _attend(q_in: Node, kv_in: Node, params: AttentionParams, causal: bool, key_mask) -> tuple[Node, Node]:
    tape = q_in.tape
    d = q_in.shape[-1]
    if d != params.w_q.shape[0]:
        raise ShapeError(f"attention expects width {params.w_q.shape[0]}, got {d}")
    q = _heads(ad.matmul(q_in, tape.param(params.w_q)), params.heads)
    k = _heads(ad.matmul(kv_in, tape.param(params.w_k)), params.heads)
    v = _heads(ad.matmul(kv_in, tape.param(params.w_v)), params.heads)
    scale = 1.0 / math.sqrt(d // params.heads)
    scores = ad.mul(ad.matmul(q, ad.transpose(k, _swap_last(len(k.shape)))), scale)
    bias = attention_bias(q.shape[-2], k.shape[-2], causal, key_mask)
    weights = ad.softmax(ad.add(scores, bias), axis=-1)
    out = ad.matmul(_merge(ad.matmul(weights, v)), tape.param(params.w_o))
    return out, weights


def mhsa_forward(
    x,
    params: AttentionParams,
    mask: Literal["causal", "none"] = "none",
    key_mask=None,
    tape: Tape | None = None,
) -> Node:
    """softmax(Q K^T / sqrt(d/h)) V по головам, склейка и проекция W_O."""
    x = _bind(x, tape)
    return _attend(x, x, params, mask == "causal", key_mask)[0]


def cross_attention(x: Node, memory: Node, params: AttentionParams, key_mask=None) -> Node:
    return _attend(x, memory, params, False, key_mask)[0]


def attention_weights(x, params: AttentionParams, mask: Literal["causal", "none"] = "none") -> np.ndarray:
    x = _bind(x, Tape(grad_enabled=False))
    return _attend(x, x, params, mask == "causal", None)[1].value


def layer_norm(x: Node, params: LayerNormParams) -> Node:
    return ad.layer_norm(x, x.tape.param(params.gain), x.tape.param(params.bias))


def feed_forward(x: Node, params: FeedForwardParams, dropout: float = 0.0, rng=None) -> Node:
    tape = x.tape
    h = ad.relu(ad.add(ad.matmul(x, tape.param(params.w1)), tape.param(params.b1)))
    h = ad.dropout(h, dropout, rng)
    return ad.add(ad.matmul(h, tape.param(params.w2)), tape.param(params.b2))


def complex_feed_forward(z: Node, params: ComplexFeedForwardParams) -> Node:
    tape = z.tape
    h = ad.modrelu(ad.matmul(z, tape.param(params.w1)), tape.param(params.act.b))
    return ad.matmul(h, tape.param(params.w2))


def bridge(z, params: BridgeParams, tape: Tape | None = None) -> Node:
    """[Re Z || Im Z] W (+ b): комплексное состояние энкодера как память декодера."""
    z = _bind(z, tape)
    tape = z.tape
    out = ad.matmul(ad.concat([ad.real(z), ad.imag(z)], axis=-1), tape.param(params.weight))
    if params.bias is not None:
        out = ad.add(out, tape.param(params.bias))
    return out
