import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fuxi_linear.data import (EmptyDatasetError, EvalReport, ParseError, SyntheticSpec,
                              UserHistory, evaluate, leave_last_out, load_interactions,
                              rank_metrics, rank_of_target, synthesize_periodic, truncate_pad,
                              write_interactions, write_remap)
from fuxi_linear.model import FuXiLinear, InteractionSequence


def write_csv(path, rows, header="user,item,timestamp"):
    path.write_text("\n".join([header, *(",".join(map(str, r)) for r in rows)]) + "\n")
    return path


# -- ingestion ------------------------------------------------------------------

def test_three_row_fixture(tmp_path):
    p = write_csv(tmp_path / "a.csv", [(7, 30, 300), (7, 10, 100), (7, 20, 200)])
    hist, remap = load_interactions(p)
    assert len(hist) == 1 and hist[0].user == 7
    assert hist[0].timestamps.tolist() == [100, 200, 300]
    assert hist[0].items.tolist() == [1, 2, 3]
    assert remap == {10: 1, 20: 2, 30: 3}


def test_duplicate_timestamps_keep_file_order(tmp_path):
    p = write_csv(tmp_path / "a.csv", [(1, 5, 50), (1, 9, 10), (1, 2, 10), (1, 7, 10)])
    hist, remap = load_interactions(p)
    inv = {v: k for k, v in remap.items()}
    assert [inv[i] for i in hist[0].items] == [9, 2, 7, 5]


def test_remap_contiguous(tmp_path):
    rows = [(u, i, t) for t, (u, i) in enumerate([(1, 900), (2, 17), (1, 4), (3, 17), (2, 55)])]
    hist, remap = load_interactions(write_csv(tmp_path / "a.csv", rows))
    assert sorted(remap.values()) == list(range(1, 5))
    assert sorted({int(i) for h in hist for i in h.items}) == [1, 2, 3, 4]


@pytest.mark.parametrize("body,err", [
    ("user,item,time\n1,2,3\n", ParseError),
    ("user,item,timestamp\n1,2\n", ParseError),
    ("user,item,timestamp\n1,x,3\n", ParseError),
    ("user,item,timestamp\n1,2,-3\n", ParseError),
    ("user,item,timestamp\n", EmptyDatasetError),
    ("", EmptyDatasetError),
])
def test_malformed_csv(tmp_path, body, err):
    p = tmp_path / "bad.csv"
    p.write_text(body)
    with pytest.raises(err):
        load_interactions(p)


def test_parse_error_names_line(tmp_path):
    p = write_csv(tmp_path / "a.csv", [(1, 2, 3), (1, 2, "oops")])
    with pytest.raises(ParseError, match=":3:"):
        load_interactions(p)


def test_csv_roundtrip(tmp_path):
    ds = synthesize_periodic(SyntheticSpec(users=5, items=40, interactions_per_user=7))
    write_interactions(ds.histories, tmp_path / "s.csv")
    back, remap = load_interactions(tmp_path / "s.csv")
    for a, b in zip(ds.histories, back):
        assert [remap[int(i)] for i in a.items] == b.items.tolist()
        assert a.timestamps.tolist() == b.timestamps.tolist()
    write_remap({10: 1, 20: 2}, tmp_path / "r.csv")
    assert (tmp_path / "r.csv").read_text().splitlines() == ["raw_id,dense_id", "10,1", "20,2"]


# -- fixed-length sequences -----------------------------------------------------

def hist(items, times=None):
    items = np.asarray(items)
    return UserHistory(0, items, np.arange(len(items)) * 10 if times is None else np.asarray(times))


def test_truncate_keeps_most_recent():
    s = truncate_pad(hist([1, 2, 3, 4, 5]), 3)
    assert s.items.tolist() == [3, 4, 5] and s.valid.all()


def test_pad_short_sequence():
    s = truncate_pad(hist([8, 9], [100, 130]), 4)
    assert s.items.tolist() == [8, 9, 0, 0]
    assert s.valid.tolist() == [True, True, False, False]
    assert s.timestamps.tolist() == [100, 130, 130, 130]


def test_targets_shift_with_holdout():
    s = truncate_pad(hist([4, 5, 6], [1, 2, 3]), 4, holdout=(7, 9))
    assert s.target_items.tolist() == [5, 6, 7, 0]
    assert s.target_times.tolist() == [2, 3, 9, 9]
    s = truncate_pad(hist([4, 5, 6], [1, 2, 3]), 3)
    assert s.target_items.tolist() == [5, 6, 0]
    with pytest.raises(ValueError):
        truncate_pad(hist([4, 5], [1, 5]), 3, holdout=(7, 4))


@given(st.lists(st.integers(1, 50), min_size=1, max_size=12), st.integers(1, 10),
       st.booleans())
def test_truncate_pad_idempotent(items, n, with_holdout):
    holdout = (3, 10**6) if with_holdout else None
    s = truncate_pad(hist(items), n, holdout)
    again = truncate_pad(s, n)
    for f in ("items", "timestamps", "valid", "target_items", "target_times"):
        assert np.array_equal(getattr(s, f), getattr(again, f))
    assert np.all(np.diff(s.timestamps) >= 0)
    assert np.all(s.target_times >= s.timestamps)


def test_leave_last_out_split():
    hs = [hist([1, 2, 3, 4]), hist([5, 6]), hist([7, 8, 9])]
    train, test = leave_last_out(hs, 5)
    assert len(train) == len(test) == 2
    assert train[0].items[:2].tolist() == [1, 2] and train[0].target_items[:2].tolist() == [2, 3]
    assert test[0].items[:3].tolist() == [1, 2, 3] and test[0].target_items[2] == 4


# -- synthetic data -------------------------------------------------------------

def test_synthetic_reproducible(tmp_path):
    spec = SyntheticSpec(users=20, items=60, interactions_per_user=15, seed=4)
    write_interactions(synthesize_periodic(spec).histories, tmp_path / "a.csv")
    write_interactions(synthesize_periodic(spec).histories, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_noise_free_rule_is_exact():
    spec = SyntheticSpec(users=30, items=64, interactions_per_user=20, buckets=8, period=64,
                         items_per_bucket=1, noise=0.0)
    ds = synthesize_periodic(spec)
    hits = [ds.rule(u, int(h.timestamps[j]), int(h.items[j - 1])) == h.items[j]
            for u, h in enumerate(ds.histories) for j in range(1, len(h))]
    assert all(hits)


def test_routine_items_follow_buckets():
    ds = synthesize_periodic(SyntheticSpec(users=40, items=96, noise=0.0))
    K = ds.spec.buckets
    for h in ds.histories:
        assert np.array_equal((h.items - 1) % K, ds.bucket(h.timestamps))
    per_user = [len(set(h.items.tolist())) for h in ds.histories]
    assert max(per_user) <= K * ds.spec.items_per_bucket


def test_full_noise_is_uniform():
    ds = synthesize_periodic(SyntheticSpec(users=300, items=50, noise=1.0, seed=2))
    items = np.concatenate([h.items for h in ds.histories])
    counts = np.bincount(items, minlength=51)[1:]
    expected = len(items) / 50
    chi2 = ((counts - expected) ** 2 / expected).sum()
    assert chi2 < 100          # 49 dof; p < 1e-5 beyond this
    prev_next = (items[:-1] == items[1:]).mean()
    assert abs(prev_next - 1 / 50) < 0.01


def test_gap_mix():
    spec = SyntheticSpec(users=200, items=40, near_frac=0.5)
    gaps = np.concatenate([np.diff(h.timestamps) for h in synthesize_periodic(spec).histories])
    near = gaps < spec.period
    assert abs(near.mean() - 0.5) < 0.03
    assert gaps.max() < 4 * spec.period
    short = SyntheticSpec(users=200, items=40, near_span=0.25)
    gaps = np.concatenate([np.diff(h.timestamps) for h in synthesize_periodic(short).histories])
    assert not np.any((gaps >= short.period // 4) & (gaps < short.period))


def test_spec_validation():
    with pytest.raises(ValueError):
        SyntheticSpec(period=500, buckets=16)
    with pytest.raises(ValueError):
        SyntheticSpec(items=20, buckets=16, items_per_bucket=2)
    with pytest.raises(ValueError):
        SyntheticSpec(noise=1.5)
    with pytest.raises(ValueError):
        SyntheticSpec(near_span=0.0)


# -- metrics --------------------------------------------------------------------

def test_perfect_and_second_rank():
    r = rank_metrics(np.ones(5), (1, 10))
    assert r.hr[1] == r.ndcg[10] == r.mrr == 1.0
    r = rank_metrics(np.full(5, 2), (10,))
    assert r.ndcg[10] == pytest.approx(1 / math.log2(3))
    assert r.mrr == 0.5
    assert EvalReport({10: 1.0}, {10: 1.0}, 1.0, 1).to_dict() == \
        {"HR@10": 1.0, "NDCG@10": 1.0, "MRR": 1.0, "count": 1}
    with pytest.raises(EmptyDatasetError):
        rank_metrics([])


def test_ties_break_by_item_id():
    ids = np.arange(1, 6)
    scores = np.array([0.5, 0.9, 0.5, 0.1, 0.5])
    assert rank_of_target(scores, ids, 2) == 1
    assert rank_of_target(scores, ids, 1) == 2
    assert rank_of_target(scores, ids, 5) == 4
    assert rank_of_target(scores, ids, 4) == 5


def test_random_scorer_hit_rate():
    V, users = 200, 20000
    rng = np.random.default_rng(9)
    ids = np.arange(1, V + 1)
    ranks = [rank_of_target(rng.random(V), ids, int(rng.integers(1, V + 1))) for _ in range(users)]
    hr = rank_metrics(ranks, (10,)).hr[10]
    p = 10 / V
    assert abs(hr - p) < 3 * math.sqrt(p * (1 - p) / users)


@given(st.lists(st.integers(1, 300), min_size=1, max_size=50))
def test_metric_orderings(ranks):
    r = rank_metrics(ranks, (10, 50))
    assert r.hr[10] <= r.hr[50]
    for k in (10, 50):
        assert r.ndcg[k] <= r.hr[k] + 1e-15


def test_evaluate_perfect_ranker(micro_cfg):
    m = FuXiLinear(micro_cfg.replace(L=0))
    m.item_emb.data = np.zeros_like(m.item_emb.data)
    m.item_emb.data[1:17] = 10 * np.eye(16)
    m.pos_emb.data = np.zeros_like(m.pos_emb.data)
    seqs = [truncate_pad(hist([i, i]), 16, holdout=(i, 100)) for i in range(1, 10)]
    r = evaluate(m, seqs, (1, 10))
    assert r.hr[1] == r.mrr == 1.0 and r.count == 9
    with pytest.raises(EmptyDatasetError):
        evaluate(m, [truncate_pad(hist([1, 2]), 16)])
    assert isinstance(seqs[0], InteractionSequence)
