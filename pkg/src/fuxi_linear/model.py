"""Embedding layer, stacked blocks, prediction layer and training objective."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .block import BlockState, FuXiBlock
from .config import ModelConfig
from .module import Module
from .positional import CapacityError
from .tensor import (Parameter, Tensor, as_tensor, concat, embedding, logsumexp,
                     trunc_normal, where)

__all__ = [
    "InteractionSequence",
    "collate",
    "FuXiLinear",
    "EmptyBatchError",
    "save_checkpoint",
    "load_checkpoint",
    "checkpoint_bytes",
]

PAD = 0
EMB_STD = 0.02  # weight matrices use fan-in scaling instead
_MASKED = -1e30


class EmptyBatchError(ValueError):
    """No position carries a training target."""


@dataclass
class InteractionSequence:
    """Right-padded interactions; arrays are ``[n]`` or batched ``[B, n]``.

    ``target_items[i]`` / ``target_times[i]`` describe the interaction after
    position i. A target of 0 means "no target" (padding, or the final
    position when nothing was held out).
    """

    items: np.ndarray
    timestamps: np.ndarray
    valid: np.ndarray
    target_items: np.ndarray
    target_times: np.ndarray

    def __len__(self):
        return self.items.shape[-1]

    @property
    def length(self) -> int:
        return int(self.valid.sum())


def collate(seqs) -> InteractionSequence:
    seqs = list(seqs)
    return InteractionSequence(*(np.stack([getattr(s, f) for s in seqs])
                                 for f in ("items", "timestamps", "valid",
                                           "target_items", "target_times")))


class FuXiLinear(Module):
    def __init__(self, config: ModelConfig, seed: int | None = None):
        self.config = config
        rng = np.random.default_rng(config.seed if seed is None else seed)
        dtype = config.dtype
        table = trunc_normal(rng, (config.vocab, config.d), std=EMB_STD, dtype=dtype)
        table[PAD] = 0.0
        self.item_emb = Parameter(table, "item_emb")
        self.pos_emb = Parameter(trunc_normal(rng, (config.n, config.d), std=EMB_STD,
                                             dtype=dtype), "pos_emb")
        self.blocks = [FuXiBlock(config, rng) for _ in range(config.L)]

    @property
    def dtype(self):
        return self.config.dtype

    # -- embedding ------------------------------------------------------------
    def embed(self, items, valid=None) -> Tensor:
        """Item plus absolute position embedding; padding slots are zero rows."""
        items = np.asarray(items, dtype=np.int64)
        n = items.shape[-1]
        if n > self.config.n:
            raise CapacityError(f"sequence length {n} exceeds capacity {self.config.n}")
        if valid is None:
            valid = items != PAD
        mask = np.asarray(valid, dtype=self.dtype)[..., None]
        return (embedding(self.item_emb, items) + self.pos_emb[:n]) * mask

    # -- forward ----------------------------------------------------------------
    def forward(self, seq: InteractionSequence, mode: str = "chunkwise",
                return_states: bool = False):
        """Final hidden states ``[..., n, d]`` (and per-layer states if requested)."""
        x = self.embed(seq.items, seq.valid)
        states = []
        for block in self.blocks:
            if return_states:
                x, st = block.forward(x, seq.timestamps, seq.target_times, mode,
                                      self.config.C, return_state=True)
                states.append(st)
            else:
                x = block.forward(x, seq.timestamps, seq.target_times, mode, self.config.C)
        return (x, states) if return_states else x

    def init_states(self, batch_shape=()) -> list[BlockState]:
        return [b.init_state(batch_shape, self.dtype) for b in self.blocks]

    def step(self, states: list[BlockState], item, position: int, t_cur, t_query):
        """Push one interaction through every layer; returns ``(states, hidden)``."""
        if position >= self.config.n:
            raise CapacityError(f"position {position + 1} exceeds capacity {self.config.n}")
        item = np.asarray(item, dtype=np.int64)
        x = embedding(self.item_emb, item) + self.pos_emb[position]
        new = []
        for block, st in zip(self.blocks, states):
            st, x = block.step(st, x, t_cur, t_query)
            new.append(st)
        return new, x

    # -- prediction -------------------------------------------------------------
    def logits(self, x, candidates=None) -> Tensor:
        """Scores ``x . E[c]`` for candidate ids (all real items by default)."""
        x = as_tensor(x)
        if candidates is None:
            table = self.item_emb[1:]
        else:
            table = embedding(self.item_emb, np.asarray(candidates, dtype=np.int64))
        return x @ table.swapaxes(-1, -2)

    def sample_negatives(self, rng: np.random.Generator, batch_shape=()) -> np.ndarray:
        """Uniform ids from the non-padding vocabulary, one set per sequence."""
        return rng.integers(1, self.config.vocab, size=(*batch_shape, self.config.neg_samples))

    def sampled_softmax_loss(self, hidden, seq: InteractionSequence,
                             rng: np.random.Generator | None = None,
                             negatives=None) -> Tensor:
        """Mean cross-entropy of each target against sampled negatives.

        ``negatives`` is ``[..., N]`` (shared by a sequence's positions) or
        ``[..., n, N]`` (per position); when omitted it is drawn from ``rng``.
        Negatives equal to the position's target are masked out.
        """
        hidden = as_tensor(hidden)
        targets = np.asarray(seq.target_items, dtype=np.int64)
        mask = np.asarray(seq.valid, dtype=bool) & (targets != PAD)
        count = int(mask.sum())
        if count == 0:
            raise EmptyBatchError("no valid targets in batch")
        if negatives is None:
            if rng is None:
                raise ValueError("need rng or explicit negatives")
            negatives = self.sample_negatives(rng, targets.shape[:-1])
        negatives = np.asarray(negatives, dtype=np.int64)
        pos = (hidden * embedding(self.item_emb, targets)).sum(axis=-1)
        neg_emb = embedding(self.item_emb, negatives)
        if negatives.ndim == targets.ndim:
            neg = hidden @ neg_emb.swapaxes(-1, -2)                    # [..., n, N]
            hits = negatives[..., None, :] == targets[..., :, None]
        else:
            neg = (hidden[..., None, :] * neg_emb).sum(axis=-1)
            hits = negatives == targets[..., None]
        # a negative that happens to be the target is dropped from the softmax
        neg = where(~hits, neg, _MASKED)
        scores = concat([pos[..., None], neg], axis=-1)
        ce = logsumexp(scores, axis=-1) - pos
        return (ce * mask.astype(hidden.dtype)).sum() * (1.0 / count)

    def loss(self, seq: InteractionSequence, rng=None, negatives=None, mode: str = "chunkwise"):
        return self.sampled_softmax_loss(self.forward(seq, mode), seq, rng, negatives)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict) -> None:
        params = dict(self.named_parameters())
        if set(params) != set(state):
            raise KeyError("parameter names do not match")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise ValueError(f"shape mismatch for {name}")
            p.data = np.array(state[name], dtype=p.dtype)
            p.zero_grad()


# -- checkpoints --------------------------------------------------------------

_MAGIC = b"FXLN"
_VERSION = 1


def checkpoint_bytes(model: FuXiLinear) -> bytes:
    """Serialize config and parameters.

    Layout: ``b"FXLN"``, u32 version, u64 header length, UTF-8 JSON header
    (config plus name/shape/offset of each tensor), then the tensors as
    little-endian float32 in header order.
    """
    entries, blobs, offset = [], [], 0
    for name, p in model.named_parameters():
        blob = np.ascontiguousarray(p.data, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(p.shape), "offset": offset,
                        "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"config": model.config.to_dict(), "tensors": entries},
                        sort_keys=True).encode()
    return _MAGIC + struct.pack("<IQ", _VERSION, len(header)) + header + b"".join(blobs)


def save_checkpoint(model: FuXiLinear, path) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(model))


def load_checkpoint(path, precision: str | None = None) -> FuXiLinear:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint")
    version, hlen = struct.unpack("<IQ", raw[4:16])
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[16:16 + hlen])
    cfg = ModelConfig.from_dict(header["config"])
    if precision:
        cfg = cfg.replace(precision=precision)
    model = FuXiLinear(cfg)
    base = 16 + hlen
    state = {}
    for e in header["tensors"]:
        start = base + e["offset"]
        arr = np.frombuffer(raw[start:start + e["nbytes"]], dtype="<f4")
        state[e["name"]] = arr.reshape(e["shape"])
    model.load_state_dict(state)
    return model
