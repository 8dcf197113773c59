"""Комплексные массивы, БПФ по основанию 2 и эталонные ядра за O(N^2).

Все функции чистые. БПФ работает по последней оси, поэтому массив
``[rows, N]`` преобразуется построчно за один векторный проход.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Literal

import numpy as np

from ..errors import NonFiniteError, ShapeError

ElementwiseOp = Literal["add", "mul", "conj_mul"]


@dataclass(frozen=True)
class RealTensor:
    data: np.ndarray

    def __post_init__(self) -> None:
        data = np.asarray(self.data, dtype=np.float64)
        if not np.all(np.isfinite(data)):
            raise NonFiniteError("RealTensor holds NaN or Inf")
        object.__setattr__(self, "data", data)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape


@dataclass(frozen=True)
class ComplexTensor:
    re: np.ndarray
    im: np.ndarray

    def __post_init__(self) -> None:
        re = np.asarray(self.re, dtype=np.float64)
        im = np.asarray(self.im, dtype=np.float64)
        if re.shape != im.shape:
            raise ShapeError(f"real part {re.shape} and imaginary part {im.shape} differ")
        if not (np.all(np.isfinite(re)) and np.all(np.isfinite(im))):
            raise NonFiniteError("ComplexTensor holds NaN or Inf")
        object.__setattr__(self, "re", re)
        object.__setattr__(self, "im", im)

    @classmethod
    def from_array(cls, z) -> "ComplexTensor":
        z = np.asarray(z, dtype=np.complex128)
        return cls(z.real.copy(), z.imag.copy())

    @classmethod
    def zeros(cls, shape: tuple[int, ...]) -> "ComplexTensor":
        return cls(np.zeros(shape), np.zeros(shape))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.re.shape

    @property
    def size(self) -> int:
        return int(self.re.size)

    def to_array(self) -> np.ndarray:
        return self.re + 1j * self.im


def as_complex(x) -> ComplexTensor:
    if isinstance(x, ComplexTensor):
        return x
    return ComplexTensor.from_array(x)


def is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def next_pow2(n: int) -> int:
    if n < 1:
        raise ValueError(f"length must be >= 1, got {n}")
    return 1 << (n - 1).bit_length()


@lru_cache(maxsize=64)
def _bit_reverse(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.intp)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    rev.setflags(write=False)
    return rev


@lru_cache(maxsize=64)
def _twiddles(n: int) -> np.ndarray:
    # W_n^k = exp(-2*pi*i*k/n) при k < n/2; этап m берёт каждый (n/m)-й элемент
    k = np.arange(max(n // 2, 1))
    angle = -2.0 * np.pi * k / n
    table = np.cos(angle) + 1j * np.sin(angle)
    table.setflags(write=False)
    return table


def _transform(z: np.ndarray, inverse: bool) -> np.ndarray:
    n = z.shape[-1]
    if not is_pow2(n):
        raise ShapeError(f"FFT length must be a power of two, got {n}")
    lead = z.shape[:-1]
    x = np.asarray(z, dtype=np.complex128)[..., _bit_reverse(n)]
    table = _twiddles(n)
    if inverse:
        table = np.conj(table)
    m = 2
    while m <= n:
        half = m // 2
        w = table[:: n // m][:half]
        x = x.reshape(*lead, n // m, 2, half)
        a = x[..., 0, :]
        t = x[..., 1, :] * w
        x = np.stack((a + t, a - t), axis=-2).reshape(*lead, n)
        m <<= 1
    if inverse:
        x = x / n
    return x


def fft_array(z: np.ndarray) -> np.ndarray:
    """Ненормированное ДПФ по последней оси комплексного ndarray."""
    return _transform(z, inverse=False)


def ifft_array(z: np.ndarray) -> np.ndarray:
    return _transform(z, inverse=True)


def fft(x) -> ComplexTensor:
    return ComplexTensor.from_array(fft_array(as_complex(x).to_array()))


def ifft(x) -> ComplexTensor:
    return ComplexTensor.from_array(ifft_array(as_complex(x).to_array()))


def dft_direct(x) -> ComplexTensor:
    """Прямое суммирование ДПФ за O(N^2)."""
    z = as_complex(x).to_array()
    n = z.shape[-1]
    k = np.arange(n)
    basis = np.exp(-2j * np.pi * np.outer(k, k) / n)
    return ComplexTensor.from_array(z @ basis.T)


def pad_pow2(x, value: complex = 0.0) -> tuple[ComplexTensor, int]:
    z = as_complex(x).to_array()
    n = z.shape[-1]
    n_pad = next_pow2(n)
    if n_pad == n:
        return ComplexTensor.from_array(z), n
    fill = np.full(z.shape[:-1] + (n_pad - n,), value, dtype=np.complex128)
    return ComplexTensor.from_array(np.concatenate([z, fill], axis=-1)), n


def circular_convolve_direct(x, k) -> ComplexTensor:
    """y[n] = sum_m x[m] * k[(n - m) mod N], почленно."""
    xz = as_complex(x).to_array()
    kz = as_complex(k).to_array()
    if xz.shape[-1] != kz.shape[-1]:
        raise ShapeError(f"length mismatch: {xz.shape[-1]} vs {kz.shape[-1]}")
    n = xz.shape[-1]
    lags = (np.arange(n)[:, None] - np.arange(n)[None, :]) % n
    circulant = kz[..., lags]
    return ComplexTensor.from_array(np.einsum("...nm,...m->...n", circulant, xz))


def complex_elementwise(a, b, op: ElementwiseOp) -> ComplexTensor:
    a = as_complex(a)
    b = as_complex(b)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    if op == "add":
        return ComplexTensor(a.re + b.re, a.im + b.im)
    if op == "mul":
        return ComplexTensor(a.re * b.re - a.im * b.im, a.re * b.im + a.im * b.re)
    if op == "conj_mul":
        return ComplexTensor(a.re * b.re + a.im * b.im, a.im * b.re - a.re * b.im)
    raise ValueError(f"unknown elementwise op {op!r}")


def polar(z) -> tuple[RealTensor, RealTensor]:
    """Модуль и фаза в (-pi, pi]; у точного нуля фаза 0."""
    z = as_complex(z)
    modulus = np.hypot(z.re, z.im)
    phase = np.arctan2(z.im, z.re)
    phase = np.where(modulus == 0.0, 0.0, phase)
    phase = np.where(phase <= -np.pi, np.pi, phase)
    return RealTensor(modulus), RealTensor(phase)
