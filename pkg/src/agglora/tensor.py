"""Dense tensors with reverse-mode automatic differentiation on a flat tape.

Everything is numpy underneath; float32 is the training dtype and float64 the
verification dtype (gradient checks are unreliable in single precision).
Kernels run single-threaded numpy, so identical inputs give bitwise-identical
outputs run to run.
"""
from __future__ import annotations

import hashlib
from typing import Callable, Iterable, Sequence

import numpy as np


class EngineError(Exception):
    pass


class ShapeError(EngineError):
    pass


class StateError(EngineError):
    pass


class NonFiniteError(EngineError):
    pass


# Checked mode: scan every kernel output for NaN/Inf and abort naming the op.
_CHECK_FINITE = True


def set_checked(flag: bool) -> bool:
    global _CHECK_FINITE
    prev = _CHECK_FINITE
    _CHECK_FINITE = flag
    return prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)


class GradTape:
    """Ordered record of executed ops; backward replays it in reverse."""

    def __init__(self):
        self.records: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []
        self.consumed = False


_tape: GradTape | None = None


class tape:
    """Context manager activating a fresh GradTape."""

    def __enter__(self) -> GradTape:
        global _tape
        self._prev = _tape
        _tape = GradTape()
        return _tape

    def __exit__(self, *exc):
        global _tape
        _tape = self._prev
        return False


class no_grad:
    def __enter__(self):
        global _tape
        self._prev = _tape
        _tape = None
        return self

    def __exit__(self, *exc):
        global _tape
        _tape = self._prev
        return False


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _tracked(*tensors: Tensor) -> bool:
    return _tape is not None and any(t.requires_grad for t in tensors)


def _finish(out_data: np.ndarray, op: str) -> None:
    if _CHECK_FINITE and not np.all(np.isfinite(out_data)):
        raise NonFiniteError(f"non-finite values produced by op '{op}'")


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _record(out: Tensor, fn: Callable[[np.ndarray], None]) -> None:
    out.requires_grad = True
    _tape.records.append((out, fn))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    out = Tensor(a.data + b.data)
    _finish(out.data, "add")
    if _tracked(a, b):
        def bw(g):
            if a.requires_grad:
                _accum(a, _unbroadcast(g, a.data.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(g, b.data.shape))
        _record(out, bw)
    return out


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    out = Tensor(a.data - b.data)
    _finish(out.data, "sub")
    if _tracked(a, b):
        def bw(g):
            if a.requires_grad:
                _accum(a, _unbroadcast(g, a.data.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(-g, b.data.shape))
        _record(out, bw)
    return out


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    out = Tensor(a.data * b.data)
    _finish(out.data, "mul")
    if _tracked(a, b):
        ad, bd = a.data, b.data
        def bw(g):
            if a.requires_grad:
                _accum(a, _unbroadcast(g * bd, a.data.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(g * ad, b.data.shape))
        _record(out, bw)
    return out


def power(a, p: float) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = Tensor(a.data ** p)
    _finish(out.data, "power")
    if _tracked(a):
        ad = a.data
        def bw(g):
            _accum(a, g * (p * ad ** (p - 1.0)))
        _record(out, bw)
    return out


def absolute(a) -> Tensor:
    """Elementwise |x|; subgradient 0 at exactly 0."""
    a = _as_tensor(a)
    out = Tensor(np.abs(a.data))
    _finish(out.data, "absolute")
    if _tracked(a):
        s = np.sign(a.data)
        def bw(g):
            _accum(a, g * s)
        _record(out, bw)
    return out


def matmul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs 2-D+ operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.data.shape} @ {b.data.shape}")
    try:
        out = Tensor(a.data @ b.data)
    except ValueError as e:
        raise ShapeError(f"matmul broadcast failure: {a.data.shape} @ {b.data.shape}") from e
    _finish(out.data, "matmul")
    if _tracked(a, b):
        ad, bd = a.data, b.data
        def bw(g):
            if a.requires_grad:
                _accum(a, _unbroadcast(g @ bd.swapaxes(-1, -2), ad.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(ad.swapaxes(-1, -2) @ g, bd.shape))
        _record(out, bw)
    return out


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = list(range(a.data.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    out = Tensor(np.transpose(a.data, axes))
    if _tracked(a):
        inv = np.argsort(axes)
        def bw(g):
            _accum(a, np.transpose(g, inv))
        _record(out, bw)
    return out


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.reshape(shape))
    if _tracked(a):
        orig = a.data.shape
        def bw(g):
            _accum(a, g.reshape(orig))
        _record(out, bw)
    return out


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))
    _finish(out.data, "sum")
    if _tracked(a):
        shape = a.data.shape
        def bw(g):
            if axis is None:
                _accum(a, np.broadcast_to(g, shape).astype(a.data.dtype))
            else:
                ge = g if keepdims else np.expand_dims(g, axis)
                _accum(a, np.broadcast_to(ge, shape).astype(a.data.dtype))
        _record(out, bw)
    return out


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def silu(a) -> Tensor:
    """x * sigmoid(x)."""
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        sig = 1.0 / (1.0 + np.exp(-a.data))
    out = Tensor(a.data * sig)
    _finish(out.data, "silu")
    if _tracked(a):
        ad = a.data
        def bw(g):
            _accum(a, g * (sig * (1.0 + ad * (1.0 - sig))))
        _record(out, bw)
    return out


def softmax_lastdim(a) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(out_data)
    _finish(out.data, "softmax_lastdim")
    if _tracked(a):
        def bw(g):
            dot = (g * out_data).sum(axis=-1, keepdims=True)
            _accum(a, out_data * (g - dot))
        _record(out, bw)
    return out


def log_softmax_lastdim(a) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out_data = shifted - lse
    out = Tensor(out_data)
    _finish(out.data, "log_softmax_lastdim")
    if _tracked(a):
        sm = np.exp(out_data)
        def bw(g):
            _accum(a, g - sm * g.sum(axis=-1, keepdims=True))
        _record(out, bw)
    return out


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather: out[..., :] = table[ids[...], :]."""
    ids = np.asarray(ids)
    out = Tensor(table.data[ids])
    _finish(out.data, "embedding")
    if _tracked(table):
        def bw(g):
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            np.add.at(table.grad, ids.reshape(-1), g.reshape(-1, table.data.shape[-1]))
        _record(out, bw)
    return out


def take_lastdim(a, idx: np.ndarray) -> Tensor:
    """out[...] = a[..., idx[...]] where idx.shape == a.shape[:-1]."""
    a = _as_tensor(a)
    idx = np.asarray(idx)
    out = Tensor(np.take_along_axis(a.data, idx[..., None], axis=-1)[..., 0])
    _finish(out.data, "take_lastdim")
    if _tracked(a):
        def bw(g):
            ga = np.zeros_like(a.data)
            np.put_along_axis(ga, idx[..., None], g[..., None], axis=-1)
            _accum(a, ga)
        _record(out, bw)
    return out


def slice_lastdim(a, i: int) -> Tensor:
    """Keepdims slice a[..., i:i+1]."""
    a = _as_tensor(a)
    out = Tensor(a.data[..., i:i + 1])
    if _tracked(a):
        def bw(g):
            ga = np.zeros_like(a.data)
            ga[..., i:i + 1] = g
            _accum(a, ga)
        _record(out, bw)
    return out


def backward(loss: Tensor, params: Iterable[Tensor] = ()) -> None:
    """Accumulate d(loss)/d(leaf) into .grad for every tracked tensor.

    Leaves passed in `params` are guaranteed a (possibly zero) grad buffer even
    if untouched by the forward.
    """
    if _tape is None:
        raise StateError("backward() called with no active GradTape")
    if _tape.consumed:
        raise StateError("backward() already called on this tape; run a new forward")
    if loss.data.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.data.shape}")
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
    loss.grad = np.ones_like(loss.data)
    for out, fn in reversed(_tape.records):
        if out.grad is not None:
            fn(out.grad)
    _tape.consumed = True


def finite_diff_grad(f: Callable[[], float], params: Sequence[Tensor], eps: float = 1e-5) -> list[np.ndarray]:
    """Central-difference gradient of scalar f() w.r.t. each param, coordinatewise."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    grads = []
    with no_grad():
        for p in params:
            g = np.zeros_like(p.data)
            flat = p.data.reshape(-1)
            gflat = g.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = f()
                flat[i] = orig - eps
                fm = f()
                flat[i] = orig
                gflat[i] = (fp - fm) / (2.0 * eps)
            grads.append(g)
    return grads


class Rng:
    """Deterministic splittable random stream.

    Child streams are keyed by hashing (seed, path), so adding a new consumer
    never perturbs existing ones.
    """

    def __init__(self, seed: int, path: str = ""):
        self.seed = int(seed)
        self.path = path

    def child(self, name: str) -> "Rng":
        return Rng(self.seed, self.path + "/" + name)

    def generator(self) -> np.random.Generator:
        h = hashlib.blake2b(f"{self.seed}:{self.path}".encode(), digest_size=16).digest()
        key = np.frombuffer(h, dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))

    def normal(self, shape, std: float = 1.0, dtype=np.float32) -> np.ndarray:
        x = self.generator().standard_normal(size=shape) * std
        return x.astype(dtype)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self.generator().integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator().permutation(n)

    def choice(self, seq, size=None, replace=True):
        return self.generator().choice(seq, size=size, replace=replace)
