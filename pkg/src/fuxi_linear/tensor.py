"""Dense tensors with tape-based reverse-mode differentiation on top of numpy.

Only the operations the model needs are implemented. Every op accepts
arbitrary leading batch dimensions and broadcasts like numpy.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

__all__ = [
    "Tensor",
    "Parameter",
    "DimensionError",
    "NumericError",
    "no_grad",
    "is_grad_enabled",
    "as_tensor",
    "matmul",
    "silu",
    "sigmoid",
    "softplus",
    "exp",
    "log",
    "rms_norm",
    "concat",
    "stack",
    "where",
    "cumsum",
    "clip_min",
    "logsumexp",
    "embedding",
    "trunc_normal",
    "check_gradient",
]

RMS_EPS = 1e-6


class DimensionError(ValueError):
    """Shapes of operands are incompatible."""


class NumericError(ArithmeticError):
    """A computation produced NaN or Inf."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class Tensor:
    """A shaped real array that records how it was computed.

    ``data`` is a plain numpy array; ``grad`` is filled in on leaves by
    :meth:`backward`.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str = ""):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- graph traversal -----------------------------------------------
    def backward(self, grad=None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else prev + pg

    # -- arithmetic ----------------------------------------------------
    def __add__(self, other):
        other = as_tensor(other, self.dtype)
        a, b = self.shape, other.shape
        ga, gb = self.requires_grad, other.requires_grad
        return _result(self.data + other.data, (self, other),
                       lambda g: (_unbroadcast(g, a) if ga else None,
                                  _unbroadcast(g, b) if gb else None))

    __radd__ = __add__

    def __sub__(self, other):
        other = as_tensor(other, self.dtype)
        a, b = self.shape, other.shape
        ga, gb = self.requires_grad, other.requires_grad
        return _result(self.data - other.data, (self, other),
                       lambda g: (_unbroadcast(g, a) if ga else None,
                                  _unbroadcast(-g, b) if gb else None))

    def __rsub__(self, other):
        return as_tensor(other, self.dtype) - self

    def __mul__(self, other):
        other = as_tensor(other, self.dtype)
        x, y = self.data, other.data
        gx, gy = self.requires_grad, other.requires_grad
        return _result(x * y, (self, other),
                       lambda g: (_unbroadcast(g * y, x.shape) if gx else None,
                                  _unbroadcast(g * x, y.shape) if gy else None))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other, self.dtype)
        x, y = self.data, other.data
        out = x / y
        return _result(out, (self, other),
                       lambda g: (_unbroadcast(g / y, x.shape),
                                  _unbroadcast(-g * out / y, y.shape)))

    def __rtruediv__(self, other):
        return as_tensor(other, self.dtype) / self

    def __neg__(self):
        return _result(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, exponent: float):
        x = self.data
        out = x ** exponent
        return _result(out, (self,), lambda g: (g * exponent * x ** (exponent - 1),))

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(as_tensor(other, self.dtype), self)

    # -- shape manipulation --------------------------------------------
    def __getitem__(self, idx):
        src_shape = self.shape
        out = self.data[idx]
        fancy = _is_fancy(idx)

        def bw(g):
            full = np.zeros(src_shape, dtype=g.dtype)
            if fancy:
                np.add.at(full, idx, g)
            else:
                full[idx] += g
            return (full,)

        return _result(out, (self,), bw)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src = self.shape
        return _result(self.data.reshape(shape), (self,), lambda g: (g.reshape(src),))

    def transpose(self, *axes):
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inv = np.argsort(axes)
        return _result(self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),))

    def swapaxes(self, a: int, b: int):
        return _result(self.data.swapaxes(a, b), (self,), lambda g: (g.swapaxes(a, b),))

    @property
    def T(self):
        return self.transpose()

    def astype(self, dtype):
        src = self.dtype
        return _result(self.data.astype(dtype), (self,), lambda g: (g.astype(src),))

    # -- reductions ----------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        src = self.shape

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, src).copy(),)

        return _result(self.data.sum(axis=axis, keepdims=keepdims), (self,), bw)

    def mean(self, axis=None, keepdims: bool = False):
        count = self.data.size if axis is None else np.prod(
            [self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)


class Parameter(Tensor):
    """A trainable leaf whose gradient buffer always exists."""

    __slots__ = ()

    def __init__(self, data, name: str = "", dtype=None):
        super().__init__(np.array(data, dtype=dtype), requires_grad=True, name=name)
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    @property
    def value(self) -> np.ndarray:
        return self.data


def _is_fancy(idx) -> bool:
    if not isinstance(idx, tuple):
        idx = (idx,)
    return any(isinstance(i, (np.ndarray, list)) for i in idx)


def _result(data, parents: tuple, backward: Callable) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is not None and np.ndim(x) == 0:
        return Tensor(np.asarray(x, dtype=dtype))
    return Tensor(x, dtype=dtype if isinstance(x, (int, float)) else None)


def _check_finite(t: Tensor, what: str) -> Tensor:
    if not np.isfinite(t.data).all():
        raise NumericError(f"{what} produced non-finite values")
    return t


# -- public ops -------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product with numpy broadcasting over leading dimensions."""
    a, b = as_tensor(a), as_tensor(b)
    A, B = a.data, b.data
    if A.shape[-1] != B.shape[-2 if B.ndim > 1 else 0]:
        raise DimensionError(f"matmul: inner dimensions differ, {A.shape} @ {B.shape}")
    out = A @ B
    need_a, need_b = a.requires_grad, b.requires_grad

    def bw(g):
        if A.ndim == 1 and B.ndim == 1:
            return g * B, g * A
        if A.ndim == 1:
            ga = _unbroadcast((B @ g[..., None])[..., 0], A.shape)
            gb = _unbroadcast(A[:, None] * g[..., None, :], B.shape)
            return ga, gb
        if B.ndim == 1:
            ga = _unbroadcast(g[..., None] * B, A.shape)
            gb = _unbroadcast((A.swapaxes(-1, -2) @ g[..., None])[..., 0], B.shape)
            return ga, gb
        return (_unbroadcast(g @ B.swapaxes(-1, -2), A.shape) if need_a else None,
                _unbroadcast(A.swapaxes(-1, -2) @ g, B.shape) if need_b else None)

    return _check_finite(_result(out, (a, b), bw), "matmul")


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    return expit(x)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid_np(x.data)
    return _result(s, (x,), lambda g: (g * s * (1 - s),))


def silu(x) -> Tensor:
    """x * sigmoid(x), elementwise."""
    x = as_tensor(x)
    s = _sigmoid_np(x.data)
    out = x.data * s
    return _check_finite(
        _result(out, (x,), lambda g: (g * (s + out * (1 - s)),)), "silu")


def softplus(x) -> Tensor:
    x = as_tensor(x)
    out = np.logaddexp(0.0, x.data).astype(x.dtype)
    return _result(out, (x,), lambda g: (g * _sigmoid_np(x.data),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,))


def clip_min(x, lo: float) -> Tensor:
    """max(x, lo); gradient is blocked where the floor is active."""
    x = as_tensor(x)
    keep = x.data > lo
    return _result(np.where(keep, x.data, lo).astype(x.dtype), (x,), lambda g: (g * keep,))


def rms_norm(x, scale=None, eps: float = RMS_EPS) -> Tensor:
    """Normalize the last axis to unit root-mean-square, then apply ``scale``."""
    x = as_tensor(x)
    if scale is not None and scale.shape[-1] != x.shape[-1]:
        raise DimensionError(f"rms_norm: scale {scale.shape} vs input {x.shape}")
    X = x.data
    inv = 1.0 / np.sqrt((X * X).mean(axis=-1, keepdims=True) + eps)
    normed = X * inv
    d = X.shape[-1]

    def bw_x(gn):
        # d/dx of x*inv(x): inv*(g - normed*mean(g*normed))
        return inv * (gn - normed * (gn * normed).sum(axis=-1, keepdims=True) / d)

    if scale is None:
        out = _result(normed, (x,), lambda g: (bw_x(g),))
    else:
        s = scale.data
        out = _result(normed * s, (x, scale),
                      lambda g: (bw_x(g * s), _unbroadcast(g * normed, s.shape)))
    return _check_finite(out, "rms_norm")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    n = len(tensors)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return _result(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), bw)


def where(cond, a, b) -> Tensor:
    """Select from ``a`` where the constant mask ``cond`` holds, else ``b``."""
    cond = np.asarray(cond, dtype=bool)
    ref = a if isinstance(a, Tensor) else b
    dtype = ref.dtype if isinstance(ref, Tensor) else None
    a, b = as_tensor(a, dtype), as_tensor(b, dtype)
    out = np.where(cond, a.data, b.data)
    need_a, need_b = a.requires_grad, b.requires_grad
    return _result(out, (a, b),
                   lambda g: (_unbroadcast(np.where(cond, g, 0), a.shape) if need_a else None,
                              _unbroadcast(np.where(cond, 0, g), b.shape) if need_b else None))


def cumsum(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)

    def bw(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return _result(np.cumsum(x.data, axis=axis), (x,), bw)


def logsumexp(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = (np.log(s) + m).squeeze(axis)
    return _result(out, (x,), lambda g: (np.expand_dims(g, axis) * e / s,))


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]`` with scatter-add backward."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"id out of range for table with {table.shape[0]} rows")
    rows = table.shape

    def bw(g):
        full = np.zeros(rows, dtype=g.dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, rows[-1]))
        return (full,)

    return _result(table.data[ids], (table,), bw)


# -- initialization ---------------------------------------------------------

def trunc_normal(rng: np.random.Generator, shape, std: float | None = None,
                 dtype=np.float32, bound: float = 2.0) -> np.ndarray:
    """Normal(0, std) samples redrawn until they fall inside +-bound*std.

    ``std=None`` scales by fan-in, ``1/sqrt(shape[0])``.
    """
    if std is None:
        std = 1.0 / np.sqrt(shape[0])
    x = rng.standard_normal(shape)
    bad = np.abs(x) > bound
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > bound
    return (x * std).astype(dtype)


# -- gradient verification --------------------------------------------------

def check_gradient(f: Callable[[], Tensor], params: Iterable[Parameter],
                   step: float = 1e-5, floor: float = 1e-6) -> float:
    """Max relative error between backprop and central finite differences.

    ``f`` must rebuild its graph from the current parameter values on every
    call. Relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    loss = f()
    if not np.isfinite(loss.data).all():
        raise NumericError("check_gradient: f is not finite at the base point")
    loss.backward()
    worst = 0.0
    with no_grad():
        for p in params:
            p.data = np.asarray(p.data)   # 0-d results of arithmetic are numpy scalars
            flat = p.data.reshape(-1)
            analytic = p.grad.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                up = float(f().data)
                flat[i] = orig - step
                down = float(f().data)
                flat[i] = orig
                if not (np.isfinite(up) and np.isfinite(down)):
                    raise NumericError(f"check_gradient: f not finite near {p.name}[{i}]")
                numeric = (up - down) / (2 * step)
                a = float(analytic[i])
                err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
                worst = max(worst, err)
    return worst
