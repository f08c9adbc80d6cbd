"""Linear positional channel.

A relative-position function f(n - i) is replaced by a learnable kernel
k(n) . k(i), with k(i) the i-th row of ``E_p``. The output for position n is
``alpha * k(n) sum_{i<=n} k(i)^T v_i + beta * v_n`` with ``v = x W_p``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernel
from .kernel import DecaySpec, KernelState
from .module import Module
from .tensor import Parameter, Tensor, as_tensor, trunc_normal, DimensionError

__all__ = [
    "PositionalChannel",
    "PositionalState",
    "CapacityError",
    "kernel_fit_quality",
    "fit_kernel",
    "alibi_profile",
]


class CapacityError(IndexError):
    """Position beyond the kernel table."""


@dataclass
class PositionalState:
    kv: KernelState  # S_p, [..., d_p, d]
    pos: int = 0     # 0-based index of the next position


_NO_DECAY = DecaySpec.constant(1.0)


class PositionalChannel(Module):
    def __init__(self, d: int, d_p: int, n_max: int, rng: np.random.Generator,
                 dtype=np.float32):
        self.d, self.d_p, self.n_max = d, d_p, n_max
        self.E_p = Parameter(trunc_normal(rng, (n_max, d_p), std=1.0 / np.sqrt(d_p),
                                          dtype=dtype), "E_p")
        self.W_p = Parameter(trunc_normal(rng, (d, d), dtype=dtype), "W_p")
        # identity start: pure projection path, positional mixing learned later
        self.alpha = Parameter(0.0, "alpha", dtype=dtype)
        self.beta = Parameter(1.0, "beta", dtype=dtype)

    def forward(self, X, mode: str = "parallel", chunk: int = 128, return_state: bool = False):
        X = as_tensor(X)
        n = X.shape[-2]
        if n > self.n_max:
            raise CapacityError(f"sequence length {n} exceeds positional capacity {self.n_max}")
        if X.shape[-1] != self.d:
            raise DimensionError(f"expected width {self.d}, got {X.shape}")
        Vp = X @ self.W_p
        Kp = self.E_p[:n]
        decay = _NO_DECAY.cast(X.dtype)
        if mode == "chunkwise":
            mixed, state = kernel.chunkwise_form(Kp, Kp, Vp, decay, chunk)
        else:
            mixed = kernel.apply(Kp, Kp, Vp, decay, mode, chunk)
            state = kernel.final_state(Kp, Vp, decay) if return_state else None
        out = self.alpha * mixed + self.beta * Vp
        if return_state:
            if state.S.shape[:-2] != X.shape[:-2]:
                state = KernelState(state.S + np.zeros((*X.shape[:-2], 1, 1), X.dtype))
            return out, PositionalState(state, n)
        return out

    def init_state(self, batch_shape=(), dtype=None) -> PositionalState:
        dtype = dtype or self.W_p.dtype
        return PositionalState(KernelState.zeros(batch_shape, self.d_p, self.d, dtype), 0)

    def step(self, state: PositionalState, x) -> tuple[PositionalState, Tensor]:
        if state.pos >= self.n_max:
            raise CapacityError(f"position {state.pos + 1} exceeds positional capacity {self.n_max}")
        x = as_tensor(x)
        v = x @ self.W_p
        k = self.E_p[state.pos]
        kv, mixed = kernel.recurrent_step(state.kv, k, k, v, 0.0)
        return PositionalState(kv, state.pos + 1), self.alpha * mixed + self.beta * v


def kernel_fit_quality(f_target, E_p) -> float:
    """Sup-norm gap ``max_{i>=j} |k(i).k(j) - f(i-j)|`` over the first ``len(f_target)`` rows."""
    f = np.asarray(f_target, dtype=np.float64)
    E = np.asarray(E_p.data if isinstance(E_p, Tensor) else E_p, dtype=np.float64)
    n = len(f)
    E = E[:n]
    gram = E @ E.T
    i, j = np.tril_indices(n)
    return float(np.abs(gram[i, j] - f[i - j]).max())


def fit_kernel(f_target, d_p: int) -> np.ndarray:
    """Least-squares positional table whose Gram matrix matches ``f(|i - j|)``.

    The best rank-``d_p`` positive semi-definite approximation of the
    symmetric Toeplitz target keeps its top non-negative eigenpairs.
    """
    f = np.asarray(f_target, dtype=np.float64)
    n = len(f)
    idx = np.arange(n)
    target = f[np.abs(idx[:, None] - idx[None, :])]
    w, U = np.linalg.eigh(target)
    top = np.argsort(w)[::-1][:d_p]
    return U[:, top] * np.sqrt(np.clip(w[top], 0.0, None))


def alibi_profile(n: int, slope: float = 1.0) -> np.ndarray:
    """Linear-decay bias ``slope * (n - delta)``.

    This is the ALiBi penalty ``-slope * delta`` shifted by the constant
    ``slope * n``, which keeps the profile non-negative (a Gram matrix has a
    non-negative diagonal).
    """
    return slope * (n - np.arange(n, dtype=np.float64))
