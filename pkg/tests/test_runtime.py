import json

import numpy as np
import pytest

from fuxi_linear.model import FuXiLinear, InteractionSequence
from fuxi_linear.runtime import (BenchReport, SessionCache, bench, decode_step, prefill, readout,
                                 top_k_items)
from fuxi_linear.temporal import OrderingError
from fuxi_linear.verify import perturb


@pytest.fixture
def model(micro_cfg):
    return perturb(FuXiLinear(micro_cfg.replace(n=40, C=8)), np.random.default_rng(7))


def history(rng, k, vocab=30):
    items = rng.integers(1, vocab, k)
    times = 1_700_000_000 + np.cumsum(rng.integers(0, 40, k))
    return items, times


def stepwise_hidden(model, items, times, t_query):
    """Recurrent run from scratch; returns the last item's hidden state."""
    states = model.init_states()
    t_next = np.append(times[1:], t_query)
    h = None
    for i, (it, t, tn) in enumerate(zip(items, times, t_next)):
        states, h = model.step(states, it, i, t, tn)
    return h.data


def test_empty_prefill(model):
    c = prefill(([], []), model)
    assert c.count == 0 and c.last_time is None
    assert all(not a.any() for a in c.arrays())
    with pytest.raises(ValueError):
        readout(c, 5, model)


def test_prefill_then_decode_matches_recurrent(model, rng):
    items, times = history(rng, 21)
    cache = prefill((items[:20], times[:20]), model)
    t_query = int(times[20]) + 17
    _, _, new = decode_step(cache, items[20], times[20], t_query, model)
    h = readout(new, t_query, model)
    ref = stepwise_hidden(model, items, times, t_query)
    assert np.abs(h - ref).max() < 1e-8


def test_decode_matches_parallel_row(model, rng):
    items, times = history(rng, 12)
    t_query = int(times[-1]) + 5
    seq = InteractionSequence(items, times, np.ones(12, bool), np.append(items[1:], 0),
                              np.append(times[1:], t_query))
    ref = model.forward(seq, mode="parallel").data[-1]
    cache = prefill((items[:11], times[:11]), model)
    ranked, scores, new = decode_step(cache, items[11], times[11], t_query, model, top_k=5)
    assert np.abs(readout(new, t_query, model) - ref).max() < 1e-8
    full = model.logits(ref).data
    assert np.allclose(np.sort(full)[::-1][:5], scores, atol=1e-8)


def test_prefill_deterministic(model, rng):
    items, times = history(rng, 15)
    a = prefill((items, times), model)
    b = prefill((items, times), model)
    assert a.serialize() == b.serialize()


def test_decode_is_pure_given_copy(model, rng):
    items, times = history(rng, 8)
    cache = prefill((items, times), model)
    snap = cache.serialize()
    r1, s1, c1 = decode_step(cache.copy(), 4, times[-1] + 3, times[-1] + 9, model)
    r2, s2, c2 = decode_step(cache.copy(), 4, times[-1] + 3, times[-1] + 9, model)
    assert np.array_equal(r1, r2) and np.array_equal(s1, s2)
    assert c1.serialize() == c2.serialize()
    assert cache.serialize() == snap


def test_full_topk_is_permutation(model, rng):
    items, times = history(rng, 5)
    cache = prefill((items, times), model)
    ranked, scores, _ = decode_step(cache, 3, times[-1], times[-1], model, top_k=29)
    assert sorted(ranked.tolist()) == list(range(1, 30))
    assert np.all(np.diff(scores) <= 0)


def test_candidate_subset(model, rng):
    items, times = history(rng, 5)
    cache = prefill((items, times), model)
    ranked, _, _ = decode_step(cache, 3, times[-1], times[-1], model, top_k=3,
                               candidates=[9, 2, 17, 5])
    assert set(ranked.tolist()) <= {9, 2, 17, 5} and len(ranked) == 3


def test_top_k_tie_break():
    ids = np.array([5, 3, 9, 1])
    assert top_k_items(np.array([1.0, 2.0, 2.0, 1.0]), ids, 4).tolist() == [3, 9, 1, 5]


def test_cache_size_constant(micro_cfg):
    m = FuXiLinear(micro_cfg.replace(n=1200, C=64))
    rng = np.random.default_rng(0)
    sizes = {prefill(history(rng, k), m).nbytes for k in (1, 10, 1000)}
    assert len(sizes) == 1


def test_decode_errors(model, rng):
    items, times = history(rng, 4)
    cache = prefill((items, times), model)
    with pytest.raises(OrderingError):
        decode_step(cache, 2, times[-1] - 1, times[-1], model)
    with pytest.raises(OrderingError):
        decode_step(cache, 2, times[-1] + 5, times[-1] + 1, model)
    with pytest.raises(IndexError):
        decode_step(cache, 30, times[-1], times[-1], model)
    with pytest.raises(OrderingError):
        prefill(([1, 2], [5, 4]), model)


def test_bench_report_schema(model):
    rep = bench(model, [8, 16], repeats=5, mode="prefill", comparator="quadratic", warmup=1)
    d = json.loads(rep.to_json())
    assert d["lengths"] == [8, 16] and d["mode"] == "prefill"
    assert [(r["form"], r["length"]) for r in d["results"]] == \
        [("chunkwise", 8), ("parallel", 8), ("chunkwise", 16), ("parallel", 16)]
    assert all(len(r["times"]) == 5 and r["ok"] for r in d["results"])
    assert len(rep.ratios("chunkwise")) == 1
    assert rep.median("parallel", 16) > 0
    dec = bench(model, [4, 8], repeats=5, mode="decode", warmup=1)
    assert isinstance(dec, BenchReport) and len(dec.results) == 2


@pytest.mark.parametrize("kw", [dict(lengths=[16, 8]), dict(repeats=3), dict(mode="train"),
                                dict(comparator="linear")])
def test_bench_validation(model, kw):
    args = dict(lengths=[8, 16], repeats=5, mode="prefill", comparator="none") | kw
    with pytest.raises(ValueError):
        bench(model, **args)


def test_serialize_header(model, rng):
    c = prefill(history(rng, 3), model)
    assert isinstance(c, SessionCache)
    blob = c.serialize()
    assert int.from_bytes(blob[:8], "little", signed=True) == 3
    arrays = list(c.arrays())
    assert all(a.dtype == np.float64 for a in arrays)
    assert blob[24:] == b"".join(a.tobytes() for a in arrays)
