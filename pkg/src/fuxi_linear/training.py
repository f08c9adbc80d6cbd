from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .config import TrainConfig
from .model import PAD, FuXiLinear, InteractionSequence, collate
from .tensor import NumericError

__all__ = ["AdamW", "train_step", "train"]

log = logging.getLogger(__name__)


@dataclass
class AdamW:
    """Adam with decoupled weight decay and linear warmup.

    Decay applies to matrices only; vectors and scalars (norm scales, decay
    logits, alpha/beta blends) are left alone.
    """

    params: list
    lr: float = 1e-3
    betas: tuple = (0.9, 0.98)
    eps: float = 1e-8
    weight_decay: float = 0.01
    warmup: int = 100
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def __post_init__(self):
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def current_lr(self) -> float:
        if self.warmup <= 0:
            return self.lr
        return self.lr * min(1.0, self.t / self.warmup)

    def step(self) -> None:
        self.t += 1
        lr = self.current_lr()
        b1, b2 = self.betas
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            if self.weight_decay and p.ndim >= 2:
                p.data *= 1 - lr * self.weight_decay
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


def train_step(model: FuXiLinear, batch: InteractionSequence, opt: AdamW,
               rng: np.random.Generator) -> float:
    """One optimizer update on ``batch``; returns the loss before the update."""
    model.zero_grad()
    loss = model.loss(batch, rng)
    value = float(loss.data)
    if not np.isfinite(value):
        raise NumericError(f"non-finite loss {value}")
    loss.backward()
    opt.step()
    model.item_emb.data[PAD] = 0.0
    return value


def train(model: FuXiLinear, sequences, cfg: TrainConfig, callback=None) -> list[float]:
    """Shuffled mini-batch training for ``cfg.steps`` updates; returns per-step losses."""
    sequences = list(sequences)
    if not sequences:
        raise ValueError("no training sequences")
    rng = np.random.default_rng(cfg.seed)
    opt = AdamW(model.parameters(), lr=cfg.lr, betas=tuple(cfg.betas),
                weight_decay=cfg.weight_decay, warmup=cfg.warmup)
    losses: list[float] = []
    order = rng.permutation(len(sequences))
    cursor = 0
    bs = min(cfg.batch_size, len(sequences))
    for step in range(cfg.steps):
        if cursor + bs > len(order):
            order = rng.permutation(len(sequences))
            cursor = 0
        batch = collate(sequences[i] for i in order[cursor:cursor + bs])
        cursor += bs
        losses.append(train_step(model, batch, opt, rng))
        if callback is not None:
            callback(step, losses[-1])
        if cfg.log_every and (step + 1) % cfg.log_every == 0:
            log.info("step %d loss %.4f", step + 1, float(np.mean(losses[-cfg.log_every:])))
    return losses
