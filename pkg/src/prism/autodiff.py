"""Обратный режим автодифференцирования над массивами numpy.

Комплексный массив дифференцируется как пара независимых вещественных.
Сопряжённое хранится упакованным: действительная часть равна dL/dRe, мнимая
равна dL/dIm. Все обратные правила ниже записаны в этом соглашении (для
линейного отображения A сопряжённое равно A^H g).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit, log_softmax as _log_softmax, softmax as _softmax

from ..errors import NonFiniteError, ShapeError, TapeError
from . import numerics

log = logging.getLogger(__name__)

Backward = Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass(eq=False)
class Parameter:
    name: str
    value: np.ndarray
    trainable: bool = True
    decay: bool = False
    grad: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        dtype = np.complex128 if np.iscomplexobj(self.value) else np.float64
        self.value = np.ascontiguousarray(self.value, dtype=dtype)
        self.grad = np.zeros_like(self.value)

    @property
    def is_complex(self) -> bool:
        return np.iscomplexobj(self.value)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)


@dataclass
class _Record:
    op: str
    inputs: tuple[int, ...]
    backward: Backward | None
    needs_grad: bool
    param: Parameter | None = None


class Node:
    __slots__ = ("tape", "index", "value")

    def __init__(self, tape: "Tape", index: int, value: np.ndarray) -> None:
        self.tape = tape
        self.index = index
        self.value = value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def is_complex(self) -> bool:
        return np.iscomplexobj(self.value)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        return f"Node(#{self.index}, shape={self.shape}, dtype={self.value.dtype})"


class Tape:
    """Лента применений примитивов, только на дозапись.

    При ``grad_enabled=False`` ничего не записывается и считаются одни
    значения: так работают оценка и декодирование.
    """

    def __init__(self, grad_enabled: bool = True) -> None:
        self.grad_enabled = grad_enabled
        self.nodes: list[_Record] = []
        self._params: dict[int, Node] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    def constant(self, value) -> Node:
        value = np.asarray(value)
        if not self.grad_enabled:
            return Node(self, -1, value)
        self.nodes.append(_Record("const", (), None, False))
        return Node(self, len(self.nodes) - 1, value)

    def param(self, p: Parameter) -> Node:
        node = self._params.get(id(p))
        if node is not None:
            return node
        if not self.grad_enabled:
            node = Node(self, -1, p.value)
        else:
            self.nodes.append(_Record("param", (), None, p.trainable, p))
            node = Node(self, len(self.nodes) - 1, p.value)
        self._params[id(p)] = node
        return node

    def lift(self, x) -> Node:
        if isinstance(x, Node):
            if x.tape is not self:
                raise TapeError("node belongs to a different tape")
            return x
        if isinstance(x, Parameter):
            return self.param(x)
        return self.constant(x)

    def record(self, op: str, value: np.ndarray, inputs: Sequence[Node], backward: Backward) -> Node:
        if not self.grad_enabled:
            return Node(self, -1, value)
        index = len(self.nodes)
        for node in inputs:
            if node.tape is not self or not 0 <= node.index < index:
                raise TapeError(f"{op}: input {node!r} is not an earlier node of this tape")
        needs = any(self.nodes[node.index].needs_grad for node in inputs)
        self.nodes.append(
            _Record(op, tuple(node.index for node in inputs), backward if needs else None, needs)
        )
        return Node(self, index, value)

    def backward(self, loss: Node) -> None:
        """Прибавляет d(loss)/d(param) к grad каждого достижимого обучаемого параметра."""
        if not self.grad_enabled:
            raise TapeError("backward on a tape recorded without gradients")
        if loss.tape is not self:
            raise TapeError("loss node belongs to a different tape")
        if loss.value.size != 1:
            raise TapeError(f"loss must be scalar, got shape {loss.value.shape}")
        grads: list[np.ndarray | None] = [None] * (loss.index + 1)
        grads[loss.index] = np.ones_like(loss.value, dtype=np.float64)
        for i in range(loss.index, -1, -1):
            g = grads[i]
            if g is None:
                continue
            grads[i] = None
            rec = self.nodes[i]
            if rec.param is not None and rec.param.trainable:
                if g.shape != rec.param.grad.shape:
                    raise ShapeError(f"gradient shape {g.shape} for {rec.param.name} {rec.param.grad.shape}")
                rec.param.grad += g
                continue
            if rec.backward is None:
                continue
            for idx, gi in zip(rec.inputs, rec.backward(g)):
                if gi is None or not self.nodes[idx].needs_grad:
                    continue
                grads[idx] = gi if grads[idx] is None else grads[idx] + gi


def _fit(g: np.ndarray, like: np.ndarray) -> np.ndarray:
    """Свернуть оси broadcast; для вещественного входа отбросить мнимую часть."""
    shape = like.shape
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    if not np.iscomplexobj(like) and np.iscomplexobj(g):
        g = g.real
    return g


def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


# -- арифметика ------------------------------------------------------------


def add(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = tape.lift(a), tape.lift(b)
    av, bv = a.value, b.value
    return tape.record("add", av + bv, (a, b), lambda g: (_fit(g, av), _fit(g, bv)))


def sub(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = tape.lift(a), tape.lift(b)
    av, bv = a.value, b.value
    return tape.record("sub", av - bv, (a, b), lambda g: (_fit(g, av), _fit(-g, bv)))


def mul(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = tape.lift(a), tape.lift(b)
    av, bv = a.value, b.value
    return tape.record(
        "mul", av * bv, (a, b), lambda g: (_fit(g * np.conj(bv), av), _fit(g * np.conj(av), bv))
    )


def matmul(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = tape.lift(a), tape.lift(b)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2:
        raise ShapeError("matmul needs operands with at least two axes")
    if av.shape[-1] != bv.shape[-2]:
        raise ShapeError(f"matmul shapes {av.shape} and {bv.shape} do not conform")

    def backward(g):
        return _fit(g @ _swap(np.conj(bv)), av), _fit(_swap(np.conj(av)) @ g, bv)

    return tape.record("matmul", av @ bv, (a, b), backward)


def sum(a, axis=None, keepdims: bool = False) -> Node:  # noqa: A001
    a = _lift1(a)
    av = a.value

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, av.shape),)

    return a.tape.record("sum", av.sum(axis=axis, keepdims=keepdims), (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Node:
    a = _lift1(a)
    count = a.value.size if axis is None else np.prod([a.value.shape[ax] for ax in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


# -- формы -----------------------------------------------------------------


def reshape(a, shape: Sequence[int]) -> Node:
    a = _lift1(a)
    orig = a.value.shape
    return a.tape.record("reshape", a.value.reshape(shape), (a,), lambda g: (g.reshape(orig),))


def transpose(a, axes: Sequence[int]) -> Node:
    a = _lift1(a)
    inverse = np.argsort(axes)
    return a.tape.record("transpose", a.value.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def index(a, key) -> Node:
    a = _lift1(a)
    av = a.value

    basic = all(isinstance(k, (slice, int, type(Ellipsis))) for k in (key if isinstance(key, tuple) else (key,)))

    def backward(g):
        out = np.zeros(av.shape, dtype=np.result_type(av, g))
        if basic:
            out[key] = g
        else:
            np.add.at(out, key, g)
        return (_fit(out, av),)

    return a.tape.record("index", av[key], (a,), backward)


def pad(a, widths: Sequence[tuple[int, int]]) -> Node:
    a = _lift1(a)
    av = a.value
    keep = tuple(slice(lo, lo + size) for (lo, _), size in zip(widths, av.shape))
    return a.tape.record("pad", np.pad(av, widths), (a,), lambda g: (g[keep],))


def concat(nodes: Sequence, axis: int = -1) -> Node:
    tape = _tape_of(*nodes)
    nodes = [tape.lift(n) for n in nodes]
    sizes = [n.value.shape[axis] for n in nodes]
    cuts = np.cumsum(sizes)[:-1]
    likes = [n.value for n in nodes]

    def backward(g):
        return tuple(_fit(part, like) for part, like in zip(np.split(g, cuts, axis=axis), likes))

    return tape.record("concat", np.concatenate(likes, axis=axis), nodes, backward)


def gather_rows(table, ids) -> Node:
    """Выборка строк ``table[ids]``; сопряжённое суммируется обратно в таблицу."""
    table = _lift1(table)
    ids = np.asarray(ids, dtype=np.intp)
    tv = table.value
    if ids.size and (ids.min() < 0 or ids.max() >= tv.shape[0]):
        raise ShapeError(f"token id out of range [0, {tv.shape[0]})")

    def backward(g):
        out = np.zeros_like(tv)
        np.add.at(out, ids, g if np.iscomplexobj(tv) else np.real(g))
        return (out,)

    return table.tape.record("gather", tv[ids], (table,), backward)


# -- комплексные числа -----------------------------------------------------


def real(z) -> Node:
    z = _lift1(z)
    zv = z.value
    return z.tape.record("real", zv.real.copy(), (z,), lambda g: (_fit(g + 0j, zv),))


def imag(z) -> Node:
    z = _lift1(z)
    zv = z.value
    return z.tape.record("imag", np.imag(zv).copy(), (z,), lambda g: (_fit(1j * g, zv),))


def make_complex(re, im) -> Node:
    tape = _tape_of(re, im)
    re, im = tape.lift(re), tape.lift(im)
    return tape.record(
        "complex", re.value + 1j * im.value, (re, im), lambda g: (_fit(g.real, re.value), _fit(g.imag, im.value))
    )


def conj(z) -> Node:
    z = _lift1(z)
    return z.tape.record("conj", np.conj(z.value), (z,), lambda g: (np.conj(g),))


def fft(z) -> Node:
    z = _lift1(z)
    zv = z.value
    return z.tape.record(
        "fft", numerics.fft_array(zv), (z,), lambda g: (_fit(np.conj(numerics.fft_array(np.conj(g))), zv),)
    )


def ifft(z) -> Node:
    z = _lift1(z)
    zv = z.value
    n = zv.shape[-1]
    return z.tape.record("ifft", numerics.ifft_array(zv), (z,), lambda g: (_fit(numerics.fft_array(g) / n, zv),))


# -- нелинейности ----------------------------------------------------------


def relu(a) -> Node:
    a = _lift1(a)
    av = a.value
    return a.tape.record("relu", np.maximum(av, 0.0), (a,), lambda g: (g * (av > 0),))


def sigmoid(a) -> Node:
    a = _lift1(a)
    y = expit(a.value)
    return a.tape.record("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))


def softmax(a, axis: int = -1) -> Node:
    a = _lift1(a)
    y = _softmax(a.value, axis=axis)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return a.tape.record("softmax", y, (a,), backward)


def cross_entropy(logits, targets, weights) -> Node:
    """Взвешенное среднее -log p(target) по позициям с весом > 0."""
    logits = _lift1(logits)
    targets = np.asarray(targets, dtype=np.intp)
    weights = np.asarray(weights, dtype=np.float64)
    total = weights.sum()
    if total <= 0:
        raise ShapeError("cross_entropy over an empty set of target positions")
    logp = _log_softmax(logits.value, axis=-1)
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = -(picked * weights).sum() / total

    def backward(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, targets[..., None], np.take_along_axis(grad, targets[..., None], -1) - 1.0, -1)
        return (grad * (weights / total)[..., None] * g,)

    return logits.tape.record("cross_entropy", np.asarray(loss), (logits,), backward)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Node:
    tape = _tape_of(x, gain, bias)
    x, gain, bias = tape.lift(x), tape.lift(gain), tape.lift(bias)
    xv = x.value
    mu = xv.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(xv.var(axis=-1, keepdims=True) + eps)
    xhat = (xv - mu) * inv

    def backward(g):
        dxhat = g * gain.value
        dx = inv * (dxhat - dxhat.mean(-1, keepdims=True) - xhat * (dxhat * xhat).mean(-1, keepdims=True))
        return dx, _fit(g * xhat, gain.value), _fit(g, bias.value)

    return tape.record("layer_norm", xhat * gain.value + bias.value, (x, gain, bias), backward)


def complex_rms_norm(z, eps: float = 1e-6) -> Node:
    """z / sqrt(mean_j |z_j|^2 + eps) по позициям; фаза не меняется."""
    z = _lift1(z)
    zv = z.value
    d = zv.shape[-1]
    r = np.sqrt((np.abs(zv) ** 2).mean(axis=-1, keepdims=True) + eps)

    def backward(g):
        proj = (np.conj(g) * zv).real.sum(axis=-1, keepdims=True)
        return (g / r - zv * proj / (d * r**3),)

    return z.tape.record("complex_rms_norm", zv / r, (z,), backward)


def modrelu(z, b) -> Node:
    """ReLU(|z| + b) * z / |z|, ноль там, где z = 0 или |z| + b <= 0."""
    tape = _tape_of(z, b)
    z, b = tape.lift(z), tape.lift(b)
    zv, bv = z.value, b.value
    m = np.abs(zv)
    active = (m > 0.0) & (m + bv > 0.0)
    safe = np.where(m > 0.0, m, 1.0)
    scale = np.where(active, 1.0 + bv / safe, 0.0)

    def backward(g):
        proj = (np.conj(g) * zv).real
        gz = np.where(active, scale * g - (bv * proj / safe**3) * zv, 0.0)
        gb = np.where(active, proj / safe, 0.0)
        return _fit(gz, zv), _fit(gb, bv)

    return tape.record("modrelu", zv * scale, (z, b), backward)


def dropout(a, rate: float, rng: np.random.Generator | None) -> Node:
    a = _lift1(a)
    if rate <= 0.0 or rng is None:
        return a
    keep = (rng.random(a.value.shape) >= rate) / (1.0 - rate)
    return mul(a, keep)


# -- вспомогательное -------------------------------------------------------


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Node):
            return x.tape
    raise TapeError("operation has no tape-bound operand")


def _lift1(x) -> Node:
    if not isinstance(x, Node):
        raise TapeError("operation needs a tape-bound operand")
    return x


def scalar(node: Node) -> float:
    return float(np.asarray(node.value).real.reshape(-1)[0])


# -- проверка --------------------------------------------------------------


def grad_check(
    f: Callable[[Tape], Node],
    params: Iterable[Parameter],
    eps: float = 1e-5,
    max_coords: int = 64,
    seed: int = 0,
) -> float:
    """Наибольшее |аналитика - центральная разность| / max(1, |центральная разность|).

    ``f`` строит скалярную потерю на переданной ленте. На параметр берётся не
    больше ``max_coords`` вещественных координат; Re и Im комплексного
    элемента считаются разными координатами.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    params = list(params)
    for p in params:
        p.zero_grad()
    tape = Tape()
    tape.backward(f(tape))

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        flat = p.value.reshape(-1)
        grad = p.grad.reshape(-1)
        parts = 2 if p.is_complex else 1
        n_coords = flat.size * parts
        chosen = rng.choice(n_coords, size=min(max_coords, n_coords), replace=False)
        for coord in chosen:
            idx, part = divmod(int(coord), parts)
            step = eps if part == 0 else 1j * eps
            orig = flat[idx]
            flat[idx] = orig + step
            plus = scalar(f(Tape(grad_enabled=False)))
            flat[idx] = orig - step
            minus = scalar(f(Tape(grad_enabled=False)))
            flat[idx] = orig
            numeric = (plus - minus) / (2.0 * eps)
            analytic = grad[idx].real if part == 0 else grad[idx].imag
            if not (np.isfinite(numeric) and np.isfinite(analytic)):
                raise NonFiniteError("non-finite value during gradient check", where=f"{p.name}[{idx}]")
            worst = max(worst, abs(analytic - numeric) / max(1.0, abs(numeric)))
    log.debug("grad_check over %d parameters: max rel err %.3e", len(params), worst)
    return worst
