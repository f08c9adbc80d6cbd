"""Serving-style sessions (prefill once, then O(1) decode steps) and a timing harness.

With more than one layer, the output of the newest item depends on the time
at which it is read out (the temporal channel scales its query by the gap to
the query time). A session therefore keeps the states of every item except
the newest one committed, plus that newest item as *pending*. When the next
interaction arrives its timestamp is the exact query time of the pending
item, so the pending item is committed first and the new one takes its place.
"""
from __future__ import annotations

import dataclasses
import gc
import json
import os
import platform
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from .model import PAD, FuXiLinear, InteractionSequence
from .temporal import OrderingError, TemporalState
from .tensor import no_grad

__all__ = [
    "SessionCache",
    "prefill",
    "readout",
    "decode_step",
    "top_k_items",
    "BenchReport",
    "bench",
    "machine_descriptor",
]

_NO_TIME = np.iinfo(np.int64).min


@dataclass
class SessionCache:
    states: list                 # committed BlockState per layer
    count: int = 0               # items ingested, pending one included
    last_time: int | None = None
    pending_item: int = PAD

    def copy(self) -> "SessionCache":
        return dataclasses.replace(self, states=list(self.states))

    def arrays(self):
        """Every state array in a fixed order."""
        for st in self.states:
            yield st.retention.kv.S.data
            yield st.positional.kv.S.data
            yield st.temporal.kv.S.data

    def serialize(self) -> bytes:
        """Counters plus raw state arrays; the length depends on the config only."""
        last = _NO_TIME if self.last_time is None else int(self.last_time)
        head = struct.pack("<qqq", self.count, last, int(self.pending_item))
        return head + b"".join(np.ascontiguousarray(a).tobytes() for a in self.arrays())

    @property
    def nbytes(self) -> int:
        return len(self.serialize())


def _valid_prefix(seq) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(seq, InteractionSequence):
        k = seq.length
        if not np.all(seq.valid[:k]):
            raise ValueError("valid mask must be a prefix")
        return np.asarray(seq.items[:k], np.int64), np.asarray(seq.timestamps[:k], np.int64)
    items, times = seq
    return np.asarray(items, np.int64), np.asarray(times, np.int64)


def prefill(seq, model: FuXiLinear) -> SessionCache:
    """Chunkwise pass over a history; ``seq`` is an unbatched sequence or ``(items, times)``."""
    items, times = _valid_prefix(seq)
    if len(items) == 0:
        return SessionCache(model.init_states())
    if np.any(np.diff(times) < 0):
        raise OrderingError("timestamps must be non-decreasing")
    head = len(items) - 1
    if head == 0:
        states = model.init_states()
    else:
        past = InteractionSequence(items[:head], times[:head], np.ones(head, bool),
                                   items[1:], times[1:])
        with no_grad():
            _, states = model.forward(past, mode="chunkwise", return_states=True)
    return SessionCache(states, len(items), int(times[-1]), int(items[-1]))


def readout(cache: SessionCache, t_query: int, model: FuXiLinear) -> np.ndarray:
    """Hidden state of the newest item queried at ``t_query``; the cache is untouched."""
    if cache.count == 0:
        raise ValueError("empty session has nothing to read out")
    if t_query < cache.last_time:
        raise OrderingError("query time precedes the newest interaction")
    with no_grad():
        _, h = model.step(cache.states, cache.pending_item, cache.count - 1,
                          cache.last_time, t_query)
    return h.data


def _commit(cache: SessionCache, t_next: int, model: FuXiLinear) -> list:
    if cache.count == 0:
        return cache.states
    with no_grad():
        states, _ = model.step(cache.states, cache.pending_item, cache.count - 1,
                               cache.last_time, t_next)
    return states


def top_k_items(scores: np.ndarray, ids: np.ndarray, k: int) -> np.ndarray:
    """Highest scores first; ties go to the smaller item id."""
    order = np.lexsort((ids, -scores))
    return ids[order[:k]]


def decode_step(cache: SessionCache, item: int, t_cur: int, t_query: int,
                model: FuXiLinear, top_k: int = 10, candidates=None):
    """Ingest one interaction and rank items for time ``t_query``.

    Returns ``(ranked_ids, scores_of_ranked, new_cache)``; ``cache`` itself is
    not modified.
    """
    item, t_cur, t_query = int(item), int(t_cur), int(t_query)
    if not 1 <= item < model.config.vocab:
        raise IndexError(f"item id {item} outside 1..{model.config.vocab - 1}")
    if cache.last_time is not None and t_cur < cache.last_time:
        raise OrderingError("time went backwards")
    if t_query < t_cur:
        raise OrderingError("query time precedes the interaction")
    states = _commit(cache, t_cur, model)
    new = SessionCache(states, cache.count + 1, t_cur, item)
    h = readout(new, t_query, model)
    ids = (np.arange(1, model.config.vocab) if candidates is None
           else np.asarray(candidates, dtype=np.int64))
    with no_grad():
        scores = model.logits(h, ids if candidates is not None else None).data
    ranked = top_k_items(scores, ids, top_k)
    by_id = dict(zip(ids.tolist(), scores.tolist()))
    return ranked, np.array([by_id[i] for i in ranked.tolist()]), new


# -- benchmarking ---------------------------------------------------------------

def machine_descriptor() -> dict:
    return {
        "platform": platform.platform(),
        "machine": platform.machine(),
        "processor": platform.processor(),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "cpus": os.cpu_count(),
    }


@dataclass
class BenchReport:
    mode: str
    comparator: str
    lengths: list
    repeats: int
    warmup: int
    results: list = field(default_factory=list)   # one dict per (form, length)
    machine: dict = field(default_factory=machine_descriptor)

    def median(self, form: str, length: int) -> float:
        for r in self.results:
            if r["form"] == form and r["length"] == length and r["ok"]:
                return r["median"]
        raise KeyError((form, length))

    def ratios(self, form: str) -> list[float]:
        """``T(L[i+1]) / T(L[i])`` over consecutive measured lengths."""
        ok = [r for r in self.results if r["form"] == form and r["ok"]]
        return [b["median"] / a["median"] for a, b in zip(ok, ok[1:])]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _time_rounds(fns: list, repeats: int, warmup: int) -> list[list[float]]:
    """Time every callable once per round, rotating through them.

    Interleaving spreads slow drifts of machine speed (thermal, neighbours)
    evenly across lengths instead of biasing whichever ran last.
    """
    for fn in fns:
        for _ in range(warmup):
            fn()
    out = [[] for _ in fns]
    gc_on = gc.isenabled()
    gc.disable()
    try:
        for _ in range(repeats):
            for i, fn in enumerate(fns):
                t0 = time.perf_counter()
                fn()
                out[i].append(time.perf_counter() - t0)
    finally:
        if gc_on:
            gc.enable()
    return out


def _stats(form: str, length: int, times: list[float]) -> dict:
    t = np.asarray(times)
    return {"form": form, "length": int(length), "ok": True, "error": None,
            "median": float(np.median(t)), "mean": float(t.mean()),
            "p10": float(np.percentile(t, 10)), "p90": float(np.percentile(t, 90)),
            "min": float(t.min()), "max": float(t.max()), "times": [float(x) for x in t]}


def _history(model: FuXiLinear, length: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    items = rng.integers(1, model.config.vocab, length)
    times = 1_600_000_000 + np.cumsum(rng.integers(0, 3600, length))
    return items, times


def _full_sequence(items, times) -> InteractionSequence:
    n = len(items)
    t_next = np.append(times[1:], times[-1])
    return InteractionSequence(items, times, np.ones(n, bool),
                               np.append(items[1:], PAD), t_next)


def bench(model: FuXiLinear, lengths, repeats: int = 7, mode: str = "prefill",
          comparator: str = "none", warmup: int = 3, seed: int = 0) -> BenchReport:
    """Wall-clock timing of prefill (whole sequence) or one decode step.

    ``prefill`` times the chunkwise forward over ``length`` items; the
    ``quadratic`` comparator times the parallel form, which materializes the
    ``n x n`` decay matrix. ``decode`` times one step after prefilling a
    history of ``length`` items. Lengths that run out of memory are recorded
    as failed entries.
    """
    lengths = [int(x) for x in lengths]
    if lengths != sorted(lengths):
        raise ValueError("lengths must be ascending")
    if repeats < 5:
        raise ValueError("repeats must be >= 5")
    if mode not in ("prefill", "decode"):
        raise ValueError(f"unknown bench mode {mode!r}")
    if comparator not in ("none", "quadratic"):
        raise ValueError(f"unknown comparator {comparator!r}")
    report = BenchReport(mode, comparator, lengths, repeats, warmup)
    forms = ["chunkwise"] + (["parallel"] if comparator == "quadratic" else [])
    jobs, failed = [], []
    for length in lengths:
        items, times = _history(model, length + 1, seed)
        for form in forms:
            try:
                fn = _make_job(model, mode, form, items, times, length)
                fn()
                jobs.append((form, length, fn))
            except MemoryError as exc:
                failed.append({"form": form, "length": length, "ok": False,
                               "error": f"MemoryError: {exc}"})
    timings = _time_rounds([j[2] for j in jobs], repeats, max(warmup - 1, 0))
    stats = [_stats(form, length, t) for (form, length, _), t in zip(jobs, timings)]
    key = {(f, n): i for i, (f, n) in enumerate((f, n) for n in lengths for f in forms)}
    report.results = sorted(stats + failed, key=lambda r: key[(r["form"], r["length"])])
    return report


def _make_job(model, mode, form, items, times, length):
    if mode == "prefill":
        seq = _full_sequence(items[:length], times[:length])

        def fn():
            with no_grad():
                model.forward(seq, mode=form)
        return fn
    if form == "chunkwise":
        cache = prefill((items[:length], times[:length]), model)

        def fn():
            decode_step(cache, items[length], times[length], times[length] + 60, model, top_k=10)
        return fn
    # quadratic decode: recompute the whole history every step
    seq = _full_sequence(items[:length + 1], times[:length + 1])

    def fn():
        with no_grad():
            model.forward(seq, mode="parallel")
    return fn
