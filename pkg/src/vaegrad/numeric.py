"""Numeric foundation: seeded random streams, a small reverse-mode tape,
the Adam optimizer and a finite-difference gradient check.

Dense arrays are plain ``numpy.float64`` ndarrays in C (row-major) order.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np


def _label_code(label) -> int:
    if isinstance(label, (int, np.integer)):
        if label < 0:
            raise ValueError(f"negative stream label {label}")
        return int(label)
    return zlib.crc32(str(label).encode("utf-8")) | (1 << 40)


class RandomSource:
    """A reproducible random stream identified by ``(seed, labels...)``.

    Child streams are derived from the key alone, never from the parent's
    draw history, so ``src.child(3)`` is the same stream no matter how much
    the parent has been consumed or in which order children are created.
    """

    def __init__(self, seed: int, key: tuple = ()):
        self.seed = int(seed)
        self.key = tuple(key)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.key)
        self.gen = np.random.Generator(np.random.Philox(ss))

    def child(self, *labels) -> "RandomSource":
        return RandomSource(self.seed, self.key + tuple(_label_code(l) for l in labels))

    def normal(self, size=None) -> np.ndarray:
        return self.gen.standard_normal(size)

    def __repr__(self):
        return f"RandomSource(seed={self.seed}, key={self.key})"


def as_source(rng) -> RandomSource:
    if isinstance(rng, RandomSource):
        return rng
    return RandomSource(int(rng))


def gaussian_sample(rng: RandomSource, mean, std) -> np.ndarray:
    """Return ``mean + std * u`` with ``u`` standard normal drawn from ``rng``."""
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    if mean.shape != std.shape:
        raise ValueError(f"shape mismatch: mean {mean.shape} vs std {std.shape}")
    if np.any(std < 0):
        raise ValueError("std entries must be >= 0")
    return mean + std * rng.normal(mean.shape)


# --------------------------------------------------------------------------
# reverse-mode tape


class Tape:
    """Records primitive operations in execution order.

    Calling :meth:`backward` walks the record in reverse and accumulates
    adjoints into every :class:`Var` that took part.
    """

    def __init__(self):
        self.records: list[tuple["Var", Callable[[np.ndarray], None]]] = []

    def var(self, value, name: str | None = None) -> "Var":
        return Var(self, np.asarray(value, dtype=np.float64), name)

    def backward(self, out: "Var") -> None:
        if out.value.size != 1:
            raise ValueError("backward needs a scalar output")
        out.grad = np.ones_like(out.value)
        for node, push in reversed(self.records):
            if node.grad is not None:
                push(node.grad)


class Var:
    __slots__ = ("tape", "value", "grad", "name")
    __array_priority__ = 100

    def __init__(self, tape: Tape, value: np.ndarray, name=None):
        self.tape = tape
        self.value = value
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def _acc(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + g

    def _make(self, value, push) -> "Var":
        out = Var(self.tape, value)
        self.tape.records.append((out, push))
        return out

    def _lift(self, other) -> "Var":
        if isinstance(other, Var):
            return other
        return Var(self.tape, np.asarray(other, dtype=np.float64))

    def __add__(self, other):
        other = self._lift(other)
        a, b = self, other
        return self._make(a.value + b.value,
                          lambda g: (a._acc(_unbroadcast(g, a.shape)),
                                     b._acc(_unbroadcast(g, b.shape))))

    __radd__ = __add__

    def __sub__(self, other):
        other = self._lift(other)
        a, b = self, other
        return self._make(a.value - b.value,
                          lambda g: (a._acc(_unbroadcast(g, a.shape)),
                                     b._acc(_unbroadcast(-g, b.shape))))

    def __rsub__(self, other):
        return self._lift(other) - self

    def __neg__(self):
        a = self
        return self._make(-a.value, lambda g: a._acc(-g))

    def __mul__(self, other):
        other = self._lift(other)
        a, b = self, other
        return self._make(a.value * b.value,
                          lambda g: (a._acc(_unbroadcast(g * b.value, a.shape)),
                                     b._acc(_unbroadcast(g * a.value, b.shape))))

    __rmul__ = __mul__

    def __matmul__(self, other):
        other = self._lift(other)
        a, b = self, other
        return self._make(a.value @ b.value,
                          lambda g: (a._acc(g @ b.value.T), b._acc(a.value.T @ g)))

    def __rmatmul__(self, other):
        return self._lift(other) @ self

    def __getitem__(self, idx):
        a = self

        def push(g):
            full = np.zeros_like(a.value)
            np.add.at(full, idx, g)
            a._acc(full)

        return self._make(a.value[idx], push)

    def reshape(self, *shape):
        a = self
        return self._make(a.value.reshape(*shape), lambda g: a._acc(g.reshape(a.shape)))

    def exp(self):
        a = self
        y = np.exp(a.value)
        return self._make(y, lambda g: a._acc(g * y))

    def tanh(self):
        a = self
        y = np.tanh(a.value)
        return self._make(y, lambda g: a._acc(g * (1.0 - y * y)))

    def relu(self):
        a = self
        mask = a.value > 0
        return self._make(np.where(mask, a.value, 0.0), lambda g: a._acc(g * mask))

    def sigmoid(self):
        a = self
        y = _sigmoid(a.value)
        return self._make(y, lambda g: a._acc(g * y * (1.0 - y)))

    def square(self):
        a = self
        return self._make(a.value * a.value, lambda g: a._acc(2.0 * g * a.value))

    def sum(self):
        a = self
        return self._make(np.asarray(a.value.sum()),
                          lambda g: a._acc(np.broadcast_to(g, a.shape)))

    def mean(self):
        a = self
        n = a.value.size
        return self._make(np.asarray(a.value.mean()),
                          lambda g: a._acc(np.broadcast_to(g / n, a.shape)))


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def apply_activation(name: str, x):
    """Activation on either a :class:`Var` or a plain ndarray."""
    if name == "identity":
        return x
    if isinstance(x, Var):
        return getattr(x, name)()
    if name == "tanh":
        return np.tanh(x)
    if name == "relu":
        return np.maximum(x, 0.0)
    if name == "sigmoid":
        return _sigmoid(x)
    raise ValueError(f"unknown activation {name!r}")


ACTIVATIONS = ("identity", "tanh", "relu", "sigmoid")


# --------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> dict:
    """One bias-corrected Adam update. Returns new parameter arrays;
    moment buffers in ``state`` are updated in place."""
    for name, g in grads.items():
        bad = np.flatnonzero(~np.isfinite(g))
        if bad.size:
            raise FloatingPointError(
                f"non-finite gradient for {name!r} at flat index {int(bad[0])}")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    out = {}
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * (g * g)
        out[name] = p - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return out


# --------------------------------------------------------------------------
# gradient check


def grad_check(loss: Callable[[Tape, Var], Var], params, rng, n_coords: int = 20,
               h: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``loss(tape, p)`` must build a scalar from the flat parameter Var ``p``.
    At least ``n_coords`` coordinates are sampled (all of them if fewer exist).
    """
    rng = as_source(rng)
    params = np.asarray(params, dtype=np.float64).ravel()
    tape = Tape()
    p = tape.var(params.copy())
    out = loss(tape, p)
    tape.backward(out)
    analytic = p.grad if p.grad is not None else np.zeros_like(params)

    def f(x):
        return float(loss(Tape(), Tape().var(x)).value)

    if params.size <= n_coords:
        idx = np.arange(params.size)
    else:
        idx = rng.gen.choice(params.size, size=n_coords, replace=False)
    worst = 0.0
    for i in idx:
        xp = params.copy()
        xm = params.copy()
        xp[i] += h
        xm[i] -= h
        numeric = (f(xp) - f(xm)) / (2 * h)
        a = analytic[i]
        denom = max(abs(a), abs(numeric), 1e-7)
        worst = max(worst, abs(a - numeric) / denom)
    return worst


def flatten(params: dict) -> tuple[np.ndarray, list[tuple[str, tuple]]]:
    layout = [(k, v.shape) for k, v in params.items()]
    return np.concatenate([v.ravel() for v in params.values()]), layout


def unflatten(flat, layout: Iterable[tuple[str, tuple]]) -> dict:
    """Inverse of :func:`flatten`; works on ndarrays and on :class:`Var`."""
    out, pos = {}, 0
    for name, shape in layout:
        n = int(np.prod(shape))
        out[name] = flat[pos:pos + n].reshape(shape)
        pos += n
    return out
