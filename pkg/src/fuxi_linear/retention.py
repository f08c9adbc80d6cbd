"""Semantic channel: multi-head retention over item representations."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernel
from .kernel import DecaySpec, KernelState
from .module import Module
from .tensor import Parameter, Tensor, as_tensor, rms_norm, silu, softplus, trunc_normal, DimensionError

__all__ = ["RetentionChannel", "RetentionState"]


@dataclass
class RetentionState:
    """Per-head states stacked as ``S[..., H, d/H, d/H]``."""

    kv: KernelState

    @property
    def num_values(self) -> int:
        return int(np.prod(self.kv.S.shape[-3:]))


class RetentionChannel(Module):
    def __init__(self, d: int, heads: int, rng: np.random.Generator, dtype=np.float32):
        if d % heads:
            raise DimensionError(f"H={heads} does not divide d={d}")
        self.d, self.H, self.dh = d, heads, d // heads
        self.W_q = Parameter(trunc_normal(rng, (d, d), dtype=dtype), "W_q")
        self.W_k = Parameter(trunc_normal(rng, (d, d), dtype=dtype), "W_k")
        self.W_v = Parameter(trunc_normal(rng, (d, d), dtype=dtype), "W_v")
        # gamma_i = 1 - 2^-(5+i): a spread of memory horizons from long to short
        gamma = 1.0 - 2.0 ** -(5.0 + np.arange(heads))
        self.gamma_logits = Parameter(np.log(gamma / (1.0 - gamma)), "gamma_logits", dtype=dtype)

    def gammas(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.gamma_logits.data))

    def log_gamma(self) -> Tensor:
        # log(sigmoid(z)) = -softplus(-z)
        return -softplus(-self.gamma_logits)

    def _split(self, Y: Tensor) -> Tensor:
        *lead, n, _ = Y.shape
        return Y.reshape(*lead, n, self.H, self.dh).swapaxes(-2, -3)

    def _merge(self, Y: Tensor) -> Tensor:
        Y = Y.swapaxes(-2, -3)
        *lead, n, _, _ = Y.shape
        return Y.reshape(*lead, n, self.d)

    def forward(self, X, mode: str = "parallel", chunk: int = 128, return_state: bool = False):
        X = as_tensor(X)
        if X.shape[-1] != self.d:
            raise DimensionError(f"expected width {self.d}, got {X.shape}")
        Q = self._split(silu(X @ self.W_q))
        K = self._split(silu(X @ self.W_k))
        V = self._split(silu(X @ self.W_v))
        decay = DecaySpec.from_log(self.log_gamma().reshape(self.H, 1), per_step=False)
        if mode == "chunkwise":
            heads, state = kernel.chunkwise_form(Q, K, V, decay, chunk)
        else:
            heads = kernel.apply(Q, K, V, decay, mode, chunk)
            state = kernel.final_state(K, V, decay) if return_state else None
        out = self._merge(rms_norm(heads))
        if return_state:
            return out, RetentionState(state)
        return out

    def init_state(self, batch_shape=(), dtype=None) -> RetentionState:
        dtype = dtype or self.W_q.dtype
        return RetentionState(KernelState.zeros((*batch_shape, self.H), self.dh, self.dh, dtype))

    def step(self, state: RetentionState, x) -> tuple[RetentionState, Tensor]:
        """Ingest one item ``x[..., d]`` and read out its output."""
        x = as_tensor(x)
        lead = x.shape[:-1]
        q = silu(x @ self.W_q).reshape(*lead, self.H, self.dh)
        k = silu(x @ self.W_k).reshape(*lead, self.H, self.dh)
        v = silu(x @ self.W_v).reshape(*lead, self.H, self.dh)
        kv, y = kernel.recurrent_step(state.kv, q, k, v, self.log_gamma())
        return RetentionState(kv), rms_norm(y).reshape(*lead, self.d)
