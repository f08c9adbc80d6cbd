"""Interaction logs, fixed-length sequences, synthetic periodic data and ranking metrics."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import PAD, FuXiLinear, InteractionSequence, collate
from .tensor import no_grad

__all__ = [
    "UserHistory",
    "ParseError",
    "EmptyDatasetError",
    "load_interactions",
    "write_interactions",
    "write_remap",
    "truncate_pad",
    "leave_last_out",
    "SyntheticSpec",
    "SyntheticDataset",
    "synthesize_periodic",
    "EvalReport",
    "rank_metrics",
    "rank_of_target",
    "evaluate",
]


class ParseError(ValueError):
    pass


class EmptyDatasetError(ValueError):
    pass


@dataclass
class UserHistory:
    """One user's chronologically ordered interactions (dense item ids)."""

    user: int
    items: np.ndarray
    timestamps: np.ndarray

    def __len__(self):
        return len(self.items)


# -- CSV ----------------------------------------------------------------------

def load_interactions(path) -> tuple[list[UserHistory], dict[int, int]]:
    """Read ``user,item,timestamp`` rows.

    Returns per-user histories sorted by time (ties keep file order) with
    items remapped to dense ids ``1..#items`` in ascending raw-id order, and
    the ``raw -> dense`` table.
    """
    rows: list[tuple[int, int, int]] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise EmptyDatasetError(f"{path}: empty file")
        if [h.strip() for h in header] != ["user", "item", "timestamp"]:
            raise ParseError(f"{path}:1: expected header user,item,timestamp, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise ParseError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            try:
                u, i, t = (int(c) for c in row)
            except ValueError:
                raise ParseError(f"{path}:{lineno}: non-integer field in {row}") from None
            if t < 0:
                raise ParseError(f"{path}:{lineno}: negative timestamp")
            rows.append((u, i, t))
    if not rows:
        raise EmptyDatasetError(f"{path}: no interactions")
    raw_items = sorted({i for _, i, _ in rows})
    remap = {raw: dense for dense, raw in enumerate(raw_items, start=1)}
    by_user: dict[int, list[tuple[int, int]]] = {}
    for u, i, t in rows:
        by_user.setdefault(u, []).append((remap[i], t))
    histories = []
    for u in sorted(by_user):
        pairs = by_user[u]
        items = np.array([p[0] for p in pairs], dtype=np.int64)
        times = np.array([p[1] for p in pairs], dtype=np.int64)
        order = np.argsort(times, kind="stable")
        histories.append(UserHistory(u, items[order], times[order]))
    return histories, remap


def write_interactions(histories, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["user", "item", "timestamp"])
        for h in histories:
            for i, t in zip(h.items, h.timestamps):
                w.writerow([h.user, int(i), int(t)])


def write_remap(remap: dict[int, int], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["raw_id", "dense_id"])
        for raw, dense in sorted(remap.items(), key=lambda kv: kv[1]):
            w.writerow([raw, dense])


# -- fixed-length sequences -----------------------------------------------------

def truncate_pad(seq, n: int, holdout: tuple[int, int] | None = None) -> InteractionSequence:
    """Keep the most recent ``n`` interactions and right-pad to length ``n``.

    Targets are the inputs shifted by one; the last valid position's target
    is ``holdout = (item, timestamp)`` when given. Padding slots repeat the
    last valid timestamp so times stay non-decreasing. Already-conforming
    :class:`InteractionSequence` inputs come back unchanged.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if isinstance(seq, InteractionSequence):
        k = seq.length
        items, times = seq.items[:k], seq.timestamps[:k]
        if holdout is None and k and seq.target_items[k - 1] != PAD:
            holdout = (int(seq.target_items[k - 1]), int(seq.target_times[k - 1]))
    else:
        items, times = np.asarray(seq.items), np.asarray(seq.timestamps)
    items = np.asarray(items, dtype=np.int64)[-n:]
    times = np.asarray(times, dtype=np.int64)[-n:]
    k = len(items)
    out_items = np.zeros(n, dtype=np.int64)
    out_times = np.zeros(n, dtype=np.int64)
    valid = np.zeros(n, dtype=bool)
    tgt_items = np.zeros(n, dtype=np.int64)
    tgt_times = np.zeros(n, dtype=np.int64)
    out_items[:k] = items
    out_times[:k] = times
    valid[:k] = True
    if k:
        last_t = times[-1]
        out_times[k:] = last_t
        tgt_items[:k - 1] = items[1:]
        tgt_times[:k - 1] = times[1:]
        if holdout is not None:
            tgt_items[k - 1], tgt_times[k - 1] = holdout
            if tgt_times[k - 1] < last_t:
                raise ValueError("held-out interaction precedes the history")
        else:
            tgt_times[k - 1] = last_t
        tgt_times[k:] = tgt_times[k - 1]
    return InteractionSequence(out_items, out_times, valid, tgt_items, tgt_times)


def leave_last_out(histories, n: int):
    """Train on all but the last interaction; evaluate on predicting the last.

    Users with fewer than 3 interactions are skipped.
    """
    train, test = [], []
    for h in histories:
        if len(h) < 3:
            continue
        it, ts = h.items, h.timestamps
        train.append(truncate_pad(UserHistory(h.user, it[:-2], ts[:-2]), n,
                                  holdout=(int(it[-2]), int(ts[-2]))))
        test.append(truncate_pad(UserHistory(h.user, it[:-1], ts[:-1]), n,
                                 holdout=(int(it[-1]), int(ts[-1]))))
    return train, test


# -- synthetic periodic data ------------------------------------------------------

@dataclass
class SyntheticSpec:
    """Users follow a routine keyed on the time-of-period bucket.

    Routine items are split into ``buckets`` pools by ``(id - 1) % buckets``.
    Users are spread over ``groups`` routines; a routine owns
    ``items_per_bucket`` items of every pool, so each user touches a small
    item set (``groups == users`` makes every routine personal). The next
    item is ``routine[bucket(t)][prev_item % items_per_bucket]`` unless noise
    replaces it with a uniform random item.

    A ``near_frac`` share of gaps is shorter than ``near_span`` periods, so
    the next item comes from one of the few buckets after the previous one;
    a model that sees elapsed time can tell these apart. The other gaps span
    one to four periods and land on a uniformly random phase, which only a
    phase-aware model can resolve.
    """

    users: int = 2000
    items: int = 200
    interactions_per_user: int = 60
    period: int = 512
    buckets: int = 16
    items_per_bucket: int = 2
    groups: int = 8
    periodic_fraction: float = 1.0
    noise: float = 0.1
    near_frac: float = 0.3
    near_span: float = 0.25
    start_time: int = 1_600_000_000
    seed: int = 0

    def __post_init__(self):
        routine_items = int(round(self.items * self.periodic_fraction))
        if self.period % self.buckets:
            raise ValueError("period must be a multiple of buckets")
        if routine_items // self.buckets < self.items_per_bucket:
            raise ValueError("not enough routine items per bucket")
        if self.groups < 1:
            raise ValueError("groups must be >= 1")
        if not 0.0 <= self.noise <= 1.0:
            raise ValueError("noise must lie in [0, 1]")
        if not 0.0 <= self.near_frac <= 1.0:
            raise ValueError("near_frac must lie in [0, 1]")
        if not 0.0 < self.near_span <= 1.0:
            raise ValueError("near_span must lie in (0, 1]")


@dataclass
class SyntheticDataset:
    spec: SyntheticSpec
    histories: list
    routines: np.ndarray = field(repr=False)     # [groups, buckets, items_per_bucket]
    user_group: np.ndarray = field(repr=False)   # [users]

    def bucket(self, t) -> np.ndarray:
        s = self.spec
        return (np.asarray(t, dtype=np.int64) % s.period) * s.buckets // s.period

    def rule(self, user_index: int, t: int, prev_item: int) -> int:
        """Noise-free next item at time ``t`` after ``prev_item``."""
        m = self.spec.items_per_bucket
        return int(self.routines[self.user_group[user_index], self.bucket(t), prev_item % m])

    @property
    def vocab(self) -> int:
        return self.spec.items + 1


def synthesize_periodic(spec: SyntheticSpec) -> SyntheticDataset:
    rng = np.random.default_rng(spec.seed)
    K, m, P = spec.buckets, spec.items_per_bucket, spec.period
    routine_items = int(round(spec.items * spec.periodic_fraction))
    pools = [np.arange(b + 1, routine_items + 1, K) for b in range(K)]
    routines = np.stack([
        np.stack([rng.choice(pools[b], size=m, replace=False) for b in range(K)])
        for _ in range(spec.groups)
    ])
    user_group = rng.permutation(np.arange(spec.users) % spec.groups)
    histories = []
    for u in range(spec.users):
        T = spec.interactions_per_user
        near = rng.random(T) < spec.near_frac
        near_max = max(1, int(P * spec.near_span))
        gaps = np.where(near, rng.integers(0, near_max, T), rng.integers(P, 4 * P, T))
        gaps[0] = 0
        times = spec.start_time + int(rng.integers(0, 10 * P)) + np.cumsum(gaps)
        noise = rng.random(T) < spec.noise
        random_items = rng.integers(1, spec.items + 1, T)
        routine = routines[user_group[u]]
        items = np.empty(T, dtype=np.int64)
        prev = int(rng.integers(1, spec.items + 1))
        for j in range(T):
            b = (times[j] % P) * K // P
            items[j] = random_items[j] if noise[j] else routine[b, prev % m]
            prev = int(items[j])
        histories.append(UserHistory(u, items, times.astype(np.int64)))
    return SyntheticDataset(spec, histories, routines, user_group)


# -- metrics ----------------------------------------------------------------------

@dataclass
class EvalReport:
    hr: dict
    ndcg: dict
    mrr: float
    count: int

    def to_dict(self) -> dict:
        out = {}
        for k in sorted(self.hr):
            out[f"HR@{k}"] = self.hr[k]
            out[f"NDCG@{k}"] = self.ndcg[k]
        out["MRR"] = self.mrr
        out["count"] = self.count
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def rank_metrics(ranks, ks=(10, 50)) -> EvalReport:
    """HR@K, NDCG@K and MRR from 1-based ranks of the ground-truth item."""
    ranks = np.asarray(ranks, dtype=np.float64)
    if ranks.size == 0:
        raise EmptyDatasetError("no ranks to evaluate")
    hr, ndcg = {}, {}
    for k in ks:
        hit = ranks <= k
        hr[k] = float(hit.mean())
        ndcg[k] = float(np.where(hit, 1.0 / np.log2(ranks + 1.0), 0.0).mean())
    return EvalReport(hr, ndcg, float((1.0 / ranks).mean()), int(ranks.size))


def rank_of_target(scores: np.ndarray, ids: np.ndarray, target: int) -> int:
    """1-based rank; ties are broken by ascending item id."""
    s = scores[ids == target][0]
    return int(1 + np.sum(scores > s) + np.sum((scores == s) & (ids < target)))


def evaluate(model: FuXiLinear, sequences, ks=(10, 50), batch_size: int = 256) -> EvalReport:
    """Full-catalog ranking of each sequence's held-out next item."""
    sequences = [s for s in sequences if s.length and s.target_items[s.length - 1] != PAD]
    if not sequences:
        raise EmptyDatasetError("empty evaluation set")
    ids = np.arange(1, model.config.vocab)
    ranks = []
    with no_grad():
        for start in range(0, len(sequences), batch_size):
            group = sequences[start:start + batch_size]
            batch = collate(group)
            hidden = model.forward(batch).data
            last = batch.valid.sum(axis=-1) - 1
            h = hidden[np.arange(len(group)), last]
            scores = model.logits(h).data
            for row, seq, pos in zip(scores, group, last):
                ranks.append(rank_of_target(row, ids, int(seq.target_items[pos])))
    return rank_metrics(ranks, ks)
