"""Temporal retention channel.

Attention weights are built from timestamps only. For head pair h with period
``P_h = B ** (b0 + h)`` and angular frequency ``theta_h = 2 pi / P_h`` the
weight of item i seen from query time t_q is

    r_h ** ((t_q - t_i) / tau) * {sin, cos}((t_q - t_i) * theta_h)

which factorizes into a rank-2 query/key product times a per-step decay, so
the channel runs on the shared decayed-attention kernel.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernel
from .kernel import DecaySpec, KernelState, LOG_DECAY_FLOOR
from .module import Module
from .tensor import (Parameter, Tensor, as_tensor, clip_min, exp, softplus, stack,
                     trunc_normal, DimensionError)

__all__ = ["TemporalChannel", "TemporalState", "OrderingError", "phase", "inverse_softplus"]


class OrderingError(ValueError):
    """Timestamps went backwards."""


def phase(t, period, dtype=np.float64) -> np.ndarray:
    """Angle ``2 pi (t mod P) / P``.

    The modulus is taken on integers, so only a value below ``P`` ever
    reaches floating point; this keeps 32-bit phases exact enough for
    epoch-scale timestamps.
    """
    dt = np.dtype(dtype)
    t = np.asarray(t, dtype=np.int64)
    period = np.asarray(period, dtype=np.int64)
    frac = (t % period).astype(dt) / period.astype(dt)
    return dt.type(2 * np.pi) * frac


def inverse_softplus(y) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


@dataclass
class TemporalState:
    kv: KernelState          # [..., 2*H_t, 2, d/(2*H_t)]
    t_last: np.ndarray | None = None


class TemporalChannel(Module):
    """Heads are ordered pair by pair: ``2h`` is the sine head, ``2h+1`` the cosine head."""

    def __init__(self, d: int, periods, rng: np.random.Generator, time_scale: float = 86400.0,
                 use_qk: bool = True, dtype=np.float32):
        self.periods = np.asarray(periods, dtype=np.int64)
        self.H_t = len(self.periods)
        if d % (2 * self.H_t):
            raise DimensionError(f"d={d} is not divisible by 2*H_t={2 * self.H_t}")
        self.d, self.dv = d, d // (2 * self.H_t)
        self.time_scale = float(time_scale)
        self.use_qk = use_qk
        self.theta = 2 * np.pi / self.periods.astype(np.float64)
        # r_h^(dt/tau) = 2^(-dt/P_h) at init: the weight halves over one period
        init_neg_log_r = np.log(2.0) * self.time_scale / self.periods.astype(np.float64)
        self.log_r = Parameter(inverse_softplus(init_neg_log_r), "log_r", dtype=dtype)
        self.W_t = Parameter(trunc_normal(rng, (d, d), dtype=dtype), "W_t")
        self.alpha_t = Parameter(np.zeros(2 * self.H_t), "alpha_t", dtype=dtype)
        self.beta_t = Parameter(np.ones(2 * self.H_t), "beta_t", dtype=dtype)

    # -- decay parameters ------------------------------------------------
    def log_r_value(self) -> Tensor:
        """log r_h = -softplus(log_r), so 0 < r_h < 1."""
        return -softplus(self.log_r)

    def r(self) -> np.ndarray:
        return np.exp(-np.logaddexp(0.0, self.log_r.data.astype(np.float64)))

    # -- query/key construction -------------------------------------------
    def _trig(self, t_query, t_key, dtype):
        """Constant parts of q and k: ``[..., 2H_t, n, 2]`` each."""
        P = self.periods[:, None]
        tq = np.asarray(t_query, dtype=np.int64)[..., None, :]
        tk = np.asarray(t_key, dtype=np.int64)[..., None, :]
        if self.use_qk:
            pq, pk = phase(tq, P, dtype), phase(tk, P, dtype)
            q_sin = np.stack([np.sin(pq), -np.cos(pq)], axis=-1)
            q_cos = np.stack([np.cos(pq), np.sin(pq)], axis=-1)
            k = np.stack([np.cos(pk), np.sin(pk)], axis=-1)
        else:
            # ablation: q.k == 1, leaving pure time decay
            shape = np.broadcast_shapes(tq.shape, P.shape)
            q_sin = q_cos = k = np.stack([np.ones(shape, dtype), np.zeros(shape, dtype)], axis=-1)
        q = np.stack([q_sin, q_cos], axis=-3)          # [..., H_t, 2, n, 2]
        k = np.stack([k, k], axis=-3)
        lead = q.shape[:-4]
        q = q.reshape(*lead, 2 * self.H_t, *q.shape[-2:])
        k = k.reshape(*k.shape[:-4], 2 * self.H_t, *k.shape[-2:])
        return q.astype(dtype), k.astype(dtype)

    def _pairs_to_heads(self, x: Tensor) -> Tensor:
        """Repeat a per-pair tensor ``[..., H_t, n]`` to ``[..., 2H_t, n]``."""
        both = stack([x, x], axis=-2)
        return both.reshape(*both.shape[:-3], 2 * self.H_t, both.shape[-1])

    def temporal_qk(self, t_query: int, t_key: int, h: int, t_key_prev: int | None = None):
        """Query/key vectors of head pair ``h`` for one (query time, key time).

        Returns ``(q_sin, q_cos, k, gamma_step)`` where ``q_*`` already carry
        the ``r^((t_query - t_key)/tau)`` scale and ``gamma_step`` is the decay
        from ``t_key_prev`` to ``t_key`` (1 when absent).
        """
        if t_query < t_key or (t_key_prev is not None and t_key < t_key_prev):
            raise OrderingError("query time precedes key time")
        lr = float(-np.logaddexp(0.0, float(self.log_r.data[h])))
        pq = float(phase(t_query, self.periods[h]))
        pk = float(phase(t_key, self.periods[h]))
        scale = np.exp((t_query - t_key) / self.time_scale * lr)
        q_sin = scale * np.array([np.sin(pq), -np.cos(pq)])
        q_cos = scale * np.array([np.cos(pq), np.sin(pq)])
        k = np.array([np.cos(pk), np.sin(pk)])
        gap = 0 if t_key_prev is None else t_key - t_key_prev
        gamma = np.exp(max(gap / self.time_scale * lr, LOG_DECAY_FLOOR))
        return q_sin, q_cos, k, float(gamma)

    def _qkd(self, timestamps, t_next, dtype):
        ts = np.asarray(timestamps, dtype=np.int64)
        tn = np.asarray(t_next, dtype=np.int64)
        if ts.shape != tn.shape:
            raise DimensionError("timestamps and t_next differ in shape")
        if np.any(np.diff(ts, axis=-1) < 0):
            raise OrderingError("timestamps must be non-decreasing")
        if np.any(tn < ts):
            raise OrderingError("query time precedes item time")
        gaps = np.diff(ts, axis=-1, prepend=ts[..., :1]).astype(np.float64) / self.time_scale
        ahead = (tn - ts).astype(np.float64) / self.time_scale
        lr = self.log_r_value()[:, None]                               # [H_t, 1]
        log_gamma = self._pairs_to_heads(Tensor(gaps[..., None, :].astype(dtype)) * lr)
        q_scale = self._pairs_to_heads(exp(Tensor(ahead[..., None, :].astype(dtype)) * lr))
        q_trig, k = self._trig(tn, ts, dtype)
        Q = Tensor(q_trig) * q_scale[..., None]
        return Q, Tensor(k), DecaySpec.from_log(log_gamma, per_step=True)

    def attention_weights(self, timestamps, t_next, dtype=np.float64) -> np.ndarray:
        """``(Q_t K_t^T * D_t)`` per head, ``[..., 2H_t, n, n]``; depends on time only."""
        Q, K, decay = self._qkd(timestamps, t_next, dtype)
        D = kernel.build_decay_matrix(decay, Q.shape[-2], dtype)
        return ((Q @ K.swapaxes(-1, -2)) * D).data

    # -- forms -------------------------------------------------------------
    def _split(self, Y: Tensor) -> Tensor:
        *lead, n, _ = Y.shape
        return Y.reshape(*lead, n, 2 * self.H_t, self.dv).swapaxes(-2, -3)

    def _blend(self, heads: Tensor, V: Tensor) -> Tensor:
        return self.alpha_t[:, None, None] * heads + self.beta_t[:, None, None] * V

    def forward(self, X, timestamps, t_next, mode: str = "parallel", chunk: int = 128,
                return_state: bool = False):
        """``t_next[i]`` is the query time of position i (the next interaction's time)."""
        X = as_tensor(X)
        if X.shape[-1] != self.d:
            raise DimensionError(f"expected width {self.d}, got {X.shape}")
        Q, K, decay = self._qkd(timestamps, t_next, X.dtype)
        V = self._split(X @ self.W_t)
        if mode == "chunkwise":
            heads, state = kernel.chunkwise_form(Q, K, V, decay, chunk)
        else:
            heads = kernel.apply(Q, K, V, decay, mode, chunk)
            state = kernel.final_state(K, V, decay) if return_state else None
        Y = self._blend(heads, V).swapaxes(-2, -3)
        out = Y.reshape(*Y.shape[:-3], Y.shape[-3], self.d)
        if return_state:
            t_last = np.asarray(timestamps, dtype=np.int64)[..., -1]
            return out, TemporalState(state, t_last)
        return out

    def init_state(self, batch_shape=(), dtype=None) -> TemporalState:
        dtype = dtype or self.W_t.dtype
        kv = KernelState.zeros((*batch_shape, 2 * self.H_t), 2, self.dv, dtype)
        return TemporalState(kv, None)

    def step(self, state: TemporalState, x, t_cur, t_query) -> tuple[TemporalState, Tensor]:
        """Ingest ``x`` stamped ``t_cur`` and read out at ``t_query``."""
        x = as_tensor(x)
        t_cur = np.asarray(t_cur, dtype=np.int64)
        t_query = np.asarray(t_query, dtype=np.int64)
        t_last = t_cur if state.t_last is None else state.t_last
        if np.any(t_cur < t_last):
            raise OrderingError("time went backwards between steps")
        if np.any(t_query < t_cur):
            raise OrderingError("query time precedes item time")
        dtype = x.dtype
        lr = self.log_r_value()
        gap = ((t_cur - t_last).astype(np.float64) / self.time_scale)[..., None]
        ahead = ((t_query - t_cur).astype(np.float64) / self.time_scale)[..., None]
        log_gamma = clip_min(Tensor(gap.astype(dtype)) * lr, LOG_DECAY_FLOOR)
        scale = exp(Tensor(ahead.astype(dtype)) * lr)
        log_gamma = self._pairs_to_heads(log_gamma[..., None])[..., 0]
        scale = self._pairs_to_heads(scale[..., None])[..., 0]
        q_trig, k = self._trig(t_query[..., None], t_cur[..., None], dtype)
        q = Tensor(q_trig[..., 0, :]) * scale[..., None]
        v = (x @ self.W_t).reshape(*x.shape[:-1], 2 * self.H_t, self.dv)
        kv, heads = kernel.recurrent_step(state.kv, q, k[..., 0, :], v, log_gamma)
        out = self._blend(heads[..., None, :], v[..., None, :])[..., 0, :]
        return TemporalState(kv, t_cur), out.reshape(*x.shape[:-1], self.d)
