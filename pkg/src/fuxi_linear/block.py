"""One FuXi-Linear block.

    O = LMCA(Norm(X0))
    Y = MFFN(O, X0)

LMCA concatenates the normalized retention, positional and temporal channel
outputs and gates them with ``Norm(X0) W_u``. MFFN fuses the 3d-wide result
back to width d with a residual to ``X0`` and applies a SiLU-gated
feed-forward transform.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ModelConfig
from .module import Module
from .positional import PositionalChannel, PositionalState
from .retention import RetentionChannel, RetentionState
from .temporal import TemporalChannel, TemporalState
from .tensor import Parameter, Tensor, as_tensor, concat, rms_norm, silu, trunc_normal

__all__ = ["FuXiBlock", "BlockState"]


@dataclass
class BlockState:
    retention: RetentionState
    positional: PositionalState
    temporal: TemporalState


class FuXiBlock(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d, dtype = cfg.d, cfg.dtype
        self.d = d
        self.use = (cfg.use_retention, cfg.use_positional, cfg.use_temporal)
        self.retention = RetentionChannel(d, cfg.H, rng, dtype)
        self.positional = PositionalChannel(d, cfg.d_p, cfg.n, rng, dtype)
        self.temporal = TemporalChannel(d, cfg.periods(), rng, cfg.time_scale,
                                        use_qk=cfg.use_temporal_qk, dtype=dtype)
        self.W_u = Parameter(trunc_normal(rng, (d, 3 * d), dtype=dtype), "W_u")
        self.W_0 = Parameter(trunc_normal(rng, (3 * d, d), dtype=dtype), "W_0")
        self.W_1 = Parameter(trunc_normal(rng, (d, cfg.d_ffn), dtype=dtype), "W_1")
        self.W_2 = Parameter(trunc_normal(rng, (d, cfg.d_ffn), dtype=dtype), "W_2")
        self.W_3 = Parameter(trunc_normal(rng, (cfg.d_ffn, d), dtype=dtype), "W_3")
        self.norm_in = Parameter(np.ones(d), "norm_in", dtype=dtype)
        self.norm_ret = Parameter(np.ones(d), "norm_ret", dtype=dtype)
        self.norm_pos = Parameter(np.ones(d), "norm_pos", dtype=dtype)
        self.norm_time = Parameter(np.ones(d), "norm_time", dtype=dtype)
        self.norm_mid = Parameter(np.ones(d), "norm_mid", dtype=dtype)

    # -- pieces -------------------------------------------------------------
    def _gate_concat(self, X: Tensor, outputs) -> Tensor:
        """Normalize channel outputs, zero-fill disabled ones, concat, gate."""
        scales = (self.norm_ret, self.norm_pos, self.norm_time)
        zeros = None
        parts = []
        for on, y, s in zip(self.use, outputs, scales):
            if on:
                parts.append(rms_norm(y, s))
            else:
                if zeros is None:
                    zeros = Tensor(np.zeros((*X.shape[:-1], self.d), dtype=X.dtype))
                parts.append(zeros)
        return concat(parts, axis=-1) * (X @ self.W_u)

    def lmca_forward(self, X, timestamps, t_next, mode: str = "parallel", chunk: int = 128,
                     return_state: bool = False):
        """LMCA on an already-normalized input ``X``."""
        X = as_tensor(X)
        ret_on, pos_on, time_on = self.use
        kw = dict(mode=mode, chunk=chunk, return_state=return_state)
        res = [
            self.retention.forward(X, **kw) if ret_on else None,
            self.positional.forward(X, **kw) if pos_on else None,
            self.temporal.forward(X, timestamps, t_next, **kw) if time_on else None,
        ]
        if return_state:
            lead, n = X.shape[:-2], X.shape[-2]
            outs = [r[0] if r is not None else None for r in res]
            fresh = self.init_state(lead, X.dtype)
            state = BlockState(
                res[0][1] if ret_on else fresh.retention,
                res[1][1] if pos_on else PositionalState(fresh.positional.kv, n),
                res[2][1] if time_on else TemporalState(
                    fresh.temporal.kv, np.asarray(timestamps, dtype=np.int64)[..., -1]),
            )
            return self._gate_concat(X, outs), state
        return self._gate_concat(X, res)

    def mffn_forward(self, O, X0) -> Tensor:
        O, X0 = as_tensor(O), as_tensor(X0)
        Y1 = O @ self.W_0 + X0
        Yn = rms_norm(Y1, self.norm_mid)
        return ((Yn @ self.W_1) * silu(Yn @ self.W_2)) @ self.W_3

    # -- forms --------------------------------------------------------------
    def forward(self, X0, timestamps, t_next, mode: str = "parallel", chunk: int = 128,
                return_state: bool = False):
        X0 = as_tensor(X0)
        Xn = rms_norm(X0, self.norm_in)
        if return_state:
            O, state = self.lmca_forward(Xn, timestamps, t_next, mode, chunk, True)
            return self.mffn_forward(O, X0), state
        return self.mffn_forward(self.lmca_forward(Xn, timestamps, t_next, mode, chunk), X0)

    def init_state(self, batch_shape=(), dtype=None) -> BlockState:
        return BlockState(self.retention.init_state(batch_shape, dtype),
                          self.positional.init_state(batch_shape, dtype),
                          self.temporal.init_state(batch_shape, dtype))

    def step(self, state: BlockState, x0, t_cur, t_query) -> tuple[BlockState, Tensor]:
        """One item through the block; equals the matching row of :meth:`forward`."""
        x0 = as_tensor(x0)
        xn = rms_norm(x0, self.norm_in)
        ret_on, pos_on, time_on = self.use
        rs, ps, ts = state.retention, state.positional, state.temporal
        y_ret = y_pos = y_time = None
        if ret_on:
            rs, y_ret = self.retention.step(rs, xn)
        if pos_on:
            ps, y_pos = self.positional.step(ps, xn)
        else:
            ps = PositionalState(ps.kv, ps.pos + 1)
        if time_on:
            ts, y_time = self.temporal.step(ts, xn, t_cur, t_query)
        else:
            ts = TemporalState(ts.kv, np.asarray(t_cur, dtype=np.int64))
        o = self._gate_concat(xn, (y_ret, y_pos, y_time))
        return BlockState(rs, ps, ts), self.mffn_forward(o, x0)
