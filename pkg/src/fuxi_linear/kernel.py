"""Decayed linear attention ``Y = (Q K^T * D) V`` in three equivalent forms.

Decay is described in log space. A :class:`DecaySpec` is either a constant
per-head multiplier (``D[i, j] = gamma ** (i - j)``) or a per-step sequence
(``D[i, j] = prod(gamma[j+1 .. i])``). All inputs may carry leading batch or
head dimensions; ``log_gamma`` must broadcast against them.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, as_tensor, clip_min, concat, cumsum, exp, where, DimensionError

__all__ = [
    "LOG_DECAY_FLOOR",
    "DecaySpec",
    "KernelState",
    "build_decay_matrix",
    "parallel_form",
    "recurrent_step",
    "recurrent_form",
    "chunkwise_form",
    "final_state",
    "apply",
]

# Per-step log decays are floored here. exp(-50) ~ 2e-22 is numerically
# "forgotten" in both precisions, and the floor bounds prefix sums so the
# materialized matrix stays accurate over long sequences.
LOG_DECAY_FLOOR = -50.0
# Constant decays never pass through a prefix sum, so a much lower floor is
# fine; exp(k * -1e4) is exactly zero for k >= 1.
_CONST_FLOOR = -1e4


@dataclass(frozen=True)
class DecaySpec:
    log_gamma: Tensor
    per_step: bool

    @classmethod
    def constant(cls, gamma) -> "DecaySpec":
        """Constant decay; ``gamma`` is a float, an array, or a Tensor of shape ``[..., 1]``."""
        if isinstance(gamma, Tensor):
            raise TypeError("pass a learnable decay through DecaySpec.from_log")
        g = np.asarray(gamma, dtype=np.float64)
        if np.any((g < 0) | (g > 1)):
            raise ValueError("decay must lie in [0, 1]")
        with np.errstate(divide="ignore"):
            lg = np.maximum(np.log(g), _CONST_FLOOR)
        if lg.ndim == 0:
            lg = lg.reshape(1)
        return cls(Tensor(lg), per_step=False)

    @classmethod
    def steps(cls, gammas) -> "DecaySpec":
        """Per-step decay multipliers along the last axis (entry 0 is never used)."""
        g = np.asarray(gammas, dtype=np.float64)
        if np.any((g < 0) | (g > 1)):
            raise ValueError("decay must lie in [0, 1]")
        with np.errstate(divide="ignore"):
            lg = np.maximum(np.log(g), LOG_DECAY_FLOOR)
        return cls(Tensor(lg), per_step=True)

    @classmethod
    def from_log(cls, log_gamma, per_step: bool) -> "DecaySpec":
        """Wrap (possibly learnable) log decays; per-step values are floored."""
        lg = as_tensor(log_gamma)
        if per_step:
            lg = clip_min(lg, LOG_DECAY_FLOOR)
        return cls(lg, per_step=per_step)

    def step_log(self, i: int) -> Tensor:
        """Log multiplier applied to the state when item ``i`` arrives."""
        if self.per_step:
            return self.log_gamma[..., i]
        return self.log_gamma[..., 0]

    def cast(self, dtype) -> "DecaySpec":
        if self.log_gamma.dtype == dtype:
            return self
        return DecaySpec(self.log_gamma.astype(dtype), self.per_step)


@dataclass
class KernelState:
    """Running key-value outer-product sum, ``[..., d_k, d_v]``."""

    S: Tensor

    @classmethod
    def zeros(cls, batch_shape, d_k: int, d_v: int, dtype=np.float64) -> "KernelState":
        return cls(Tensor(np.zeros((*batch_shape, d_k, d_v), dtype=dtype)))


def _segment_logs(decay: DecaySpec, start: int, stop: int, dtype):
    """Log decay between positions inside ``[start, stop)``.

    Returns ``(pair, lead, tail)``: ``pair[..., i, j]`` is the log of D[i, j]
    (lower triangle only, -inf above), ``lead[..., i]`` the log-product of
    steps ``start..i`` and ``tail[..., j]`` the log-product of steps
    ``j+1..stop-1``.
    """
    m = stop - start
    causal = np.tril(np.ones((m, m), dtype=bool))
    if decay.per_step:
        # prefix sums in float64 regardless of compute precision
        lg = decay.log_gamma[..., start:stop].astype(np.float64)
        L = cumsum(lg, axis=-1)
        diff = L[..., :, None] - L[..., None, :]
        pair = where(causal, diff, -np.inf)
        lead = L
        tail = L[..., m - 1:m] - L
    else:
        lg = decay.log_gamma.astype(np.float64)  # [..., 1]
        steps = np.arange(m, dtype=np.float64)
        pair = where(causal, lg[..., None] * (steps[:, None] - steps[None, :]), -np.inf)
        lead = lg * (steps + 1)
        tail = lg * (m - 1 - steps)
    return pair.astype(dtype), lead.astype(dtype), tail.astype(dtype)


def build_decay_matrix(decay: DecaySpec, n: int, dtype=np.float64) -> Tensor:
    """The ``n x n`` lower-triangular decay matrix with unit diagonal."""
    if n < 1:
        raise ValueError("n must be positive")
    pair, _, _ = _segment_logs(decay, 0, n, dtype)
    return exp(pair)


def _check_qkv(Q: Tensor, K: Tensor, V: Tensor) -> None:
    if Q.shape[-1] != K.shape[-1]:
        raise DimensionError(f"query/key widths differ: {Q.shape} vs {K.shape}")
    if not (Q.shape[-2] == K.shape[-2] == V.shape[-2]):
        raise DimensionError(f"sequence lengths differ: {Q.shape}, {K.shape}, {V.shape}")


def parallel_form(Q, K, V, decay: DecaySpec) -> Tensor:
    """Materialize ``D`` and compute ``(Q K^T * D) V``; O(n^2) reference."""
    Q, K, V = as_tensor(Q), as_tensor(K), as_tensor(V)
    _check_qkv(Q, K, V)
    D = build_decay_matrix(decay, Q.shape[-2], dtype=Q.dtype)
    scores = (Q @ K.swapaxes(-1, -2)) * D
    return scores @ V


def recurrent_step(state: KernelState, q, k, v, log_gamma) -> tuple[KernelState, Tensor]:
    """``S' = gamma * S + k^T v`` and ``y = q S'`` for one item.

    ``log_gamma`` is the log of this step's multiplier (a float or a Tensor
    broadcastable to the batch shape).
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    g = exp(as_tensor(log_gamma, state.S.dtype))
    if g.ndim:
        g = g[..., None, None]
    S = state.S * g + k[..., :, None] * v[..., None, :]
    y = (q[..., None, :] @ S)[..., 0, :]
    return KernelState(S), y


def recurrent_form(Q, K, V, decay: DecaySpec, state: KernelState | None = None):
    """Iterate :func:`recurrent_step` over the sequence. Returns ``(Y, state)``."""
    Q, K, V = as_tensor(Q), as_tensor(K), as_tensor(V)
    _check_qkv(Q, K, V)
    if state is None:
        lead = np.broadcast_shapes(Q.shape[:-2], K.shape[:-2], V.shape[:-2],
                                   decay.log_gamma.shape[:-1])
        state = KernelState.zeros(lead, Q.shape[-1], V.shape[-1], dtype=V.dtype)
    decay = decay.cast(Q.dtype)
    outs = []
    for i in range(Q.shape[-2]):
        state, y = recurrent_step(state, Q[..., i, :], K[..., i, :], V[..., i, :],
                                  decay.step_log(i))
        outs.append(y[..., None, :])
    return concat(outs, axis=-2), state


def chunkwise_form(Q, K, V, decay: DecaySpec, chunk: int,
                   state: KernelState | None = None):
    """Blockwise form: quadratic inside chunks of ``chunk`` items, recurrent across.

    Returns ``(Y, final_state)``. A trailing partial chunk is processed at
    its natural length.
    """
    if chunk < 1:
        raise ValueError("chunk size must be >= 1")
    Q, K, V = as_tensor(Q), as_tensor(K), as_tensor(V)
    _check_qkv(Q, K, V)
    n = Q.shape[-2]
    S = None if state is None else state.S
    outs = []
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        q, k, v = Q[..., start:stop, :], K[..., start:stop, :], V[..., start:stop, :]
        pair, lead, tail = _segment_logs(decay, start, stop, Q.dtype)
        inner = ((q @ k.swapaxes(-1, -2)) * exp(pair)) @ v
        if S is None:
            y = inner
        else:
            y = (q * exp(lead)[..., None]) @ S + inner
        kv = (k * exp(tail)[..., None]).swapaxes(-1, -2) @ v
        if S is None:
            S = kv
        else:
            S = S * exp(lead[..., -1:])[..., None] + kv
        outs.append(y)
    Y = outs[0] if len(outs) == 1 else concat(outs, axis=-2)
    return Y, KernelState(S)


def final_state(K, V, decay: DecaySpec) -> KernelState:
    """State after ingesting the whole sequence, without computing outputs."""
    K, V = as_tensor(K), as_tensor(V)
    n = K.shape[-2]
    _, _, tail = _segment_logs(decay, 0, n, K.dtype)
    return KernelState((K * exp(tail)[..., None]).swapaxes(-1, -2) @ V)


def apply(Q, K, V, decay: DecaySpec, mode: str = "parallel", chunk: int = 128) -> Tensor:
    """Dispatch on ``mode`` in {"parallel", "chunkwise", "recurrent"}."""
    if mode == "parallel":
        return parallel_form(Q, K, V, decay)
    if mode == "chunkwise":
        return chunkwise_form(Q, K, V, decay, chunk)[0]
    if mode == "recurrent":
        return recurrent_form(Q, K, V, decay)[0]
    raise ValueError(f"unknown mode {mode!r}")
