"""One test per acceptance criterion, each at its stated tolerance.

Every test records a PASS/FAIL line that is repeated in the terminal summary.
"""
import time

import numpy as np

from fuxi_linear.ablation import run_ablation
from fuxi_linear.cli import main
from fuxi_linear.config import ModelConfig, TrainConfig
from fuxi_linear.model import FuXiLinear
from fuxi_linear.positional import alibi_profile, fit_kernel, kernel_fit_quality
from fuxi_linear.runtime import bench, prefill
from fuxi_linear.training import train
from fuxi_linear.verify import (check_gradients, check_kernel_forms, check_model_forms,
                                check_phase_float32, check_temporal_factorization,
                                random_sequence)


def test_1_three_form_equivalence(acceptance):
    t0 = time.perf_counter()
    kern = check_kernel_forms(configs=100, tol=1e-10, max_n=256)
    rng = np.random.default_rng(11)
    models = []
    for s in range(6):
        d = int(rng.choice([8, 16, 32, 64]))
        H_t = int(rng.choice([h for h in (1, 2, 4) if d % (2 * h) == 0]))
        cfg = ModelConfig(n=int(rng.integers(8, 129)), d=d, L=int(rng.integers(1, 3)),
                          H=int(rng.choice([1, 2, 4])), H_t=H_t, d_p=8, d_ffn=2 * d,
                          C=int(rng.integers(4, 33)), vocab=50, neg_samples=8,
                          time_scale=float(rng.choice([1.0, 60.0, 3600.0])),
                          precision="float64")
        models.append(check_model_forms(cfg, tol=1e-8, seed=s))
    worst_model = max(r.value for r in models)
    secs = time.perf_counter() - t0
    ok = kern.passed and all(r.passed for r in models) and secs < 120
    acceptance(1, "three-form equivalence", ok,
               f"kernel max diff {kern.value:.2e} over 100 configs (tol 1e-10), "
               f"model max diff {worst_model:.2e} over 6 configs (tol 1e-8), {secs:.0f}s")
    assert ok


def test_2_temporal_factorization(acceptance):
    t0 = time.perf_counter()
    r = check_temporal_factorization(pairs=10_000, tol=1e-10, max_dt=10**6)
    secs = time.perf_counter() - t0
    ok = r.passed and secs < 60
    acceptance(2, "temporal sin/cos factorization", ok,
               f"max error {r.value:.2e} over >=1e4 pairs, dt in [0, 1e6] (tol 1e-10), {secs:.1f}s")
    assert ok


def test_3_phase_float32(acceptance):
    r = check_phase_float32(t0=10**9, tol=1e-6, naive_min=1e-2)
    acceptance(3, "32-bit phase safety", r.passed,
               f"modulus error {r.value:.2e} (tol 1e-6), {r.detail}")
    assert r.passed


def test_4_gradients(acceptance):
    cfg = ModelConfig(n=8, d=16, L=1, H=2, H_t=2, d_p=8, d_ffn=32, C=4, B=4, vocab=20,
                      neg_samples=7, time_scale=10.0, precision="float64")
    t0 = time.perf_counter()
    r = check_gradients(cfg, tol=1e-4)
    secs = time.perf_counter() - t0
    ok = r.passed and secs < 300
    acceptance(4, "finite-difference gradients", ok,
               f"max relative error {r.value:.2e} (tol 1e-4), {r.detail}, {secs:.0f}s")
    assert ok


def test_5_complexity_trend(acceptance):
    t0 = time.perf_counter()
    model = FuXiLinear(ModelConfig(n=4200, d=64, L=2, vocab=201))
    dec = bench(model, [128, 4096], repeats=21, mode="decode", warmup=3)
    decode_ratio = dec.median("chunkwise", 4096) / dec.median("chunkwise", 128)
    pre = bench(model, [512, 1024, 2048], repeats=7, mode="prefill", comparator="quadratic",
                warmup=3)
    chunk = pre.ratios("chunkwise")
    quad = pre.ratios("parallel")
    secs = time.perf_counter() - t0
    ok = (decode_ratio <= 1.5 and all(1.5 <= x <= 2.8 for x in chunk) and quad[-1] >= 3.0
          and secs < 600)
    acceptance(5, "complexity trend", ok,
               f"decode T(4096)/T(128) = {decode_ratio:.2f} (<= 1.5); chunkwise prefill ratios "
               f"{[round(x, 2) for x in chunk]} (in [1.5, 2.8]); materialized-D ratios "
               f"{[round(x, 2) for x in quad]} (top >= 3.0); {secs:.0f}s")
    assert ok


def test_6_constant_cache(acceptance):
    model = FuXiLinear(ModelConfig(n=10_001, d=32, L=2, H=2, H_t=4, d_p=16, d_ffn=64, C=128))
    rng = np.random.default_rng(0)
    sizes = []
    for length in (10, 10_000):
        items = rng.integers(1, model.config.vocab, length)
        times = 1_600_000_000 + np.cumsum(rng.integers(0, 3600, length))
        sizes.append(prefill((items, times), model).nbytes)
    ok = sizes[0] == sizes[1]
    acceptance(6, "constant-memory decode", ok,
               f"{sizes[0]} bytes at 10 items, {sizes[1]} bytes at 10,000 items")
    assert ok


def test_7_periodicity_utility(acceptance):
    t0 = time.perf_counter()
    res = run_ablation()
    secs = time.perf_counter() - t0
    full, no_qk, no_time = (res.hr(v) for v in ("full", "no_temporal_qk", "no_temporal"))
    ok = full >= 1.2 * no_time and no_time < no_qk < full and secs < 1800
    acceptance(7, "periodicity utility", ok,
               f"HR@10 full {full:.4f}, w/o Q_t,K_t {no_qk:.4f}, w/o temporal {no_time:.4f}; "
               f"full/no-temporal = {full / no_time:.2f} (>= 1.2); {secs:.0f}s")
    assert ok


def test_8_positional_kernel_capacity(acceptance):
    f = alibi_profile(128)
    gap = kernel_fit_quality(f, fit_kernel(f, 32))
    span = f.max() - f.min()
    ok = gap < 0.05 * span
    acceptance(8, "positional kernel capacity", ok,
               f"sup-norm gap {gap:.3f} = {100 * gap / span:.2f}% of range (< 5%)")
    assert ok


def test_9_overfit(acceptance):
    cfg = ModelConfig(n=8, d=16, L=1, H=2, H_t=2, d_p=8, d_ffn=32, C=8, B=4, vocab=20,
                      neg_samples=16, time_scale=10.0)
    rng = np.random.default_rng(0)
    batch = [random_sequence(rng, cfg, 8, 30) for _ in range(4)]
    losses = train(FuXiLinear(cfg), batch,
                   TrainConfig(steps=500, batch_size=4, lr=1e-2, warmup=20, log_every=0))
    below = next((i + 1 for i, x in enumerate(losses) if x < 0.1), None)
    ok = below is not None
    acceptance(9, "overfit smoke", ok,
               f"loss {losses[0]:.3f} -> {losses[-1]:.4f}; first below 0.1 at step {below}")
    assert ok


TOML = """
[model]
n = 16
d = 16
L = 2
H = 2
H_t = 2
d_p = 8
d_ffn = 32
C = 8
neg_samples = 16
time_scale = 1.0

[train]
steps = 30
batch_size = 8
lr = 0.003

[synth]
users = 40
items = 48
interactions_per_user = 20
period = 64
buckets = 4
"""


def test_10_determinism(acceptance, tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text(TOML)
    blobs = {}
    for kind in ("train", "verify"):
        for run in (0, 1):
            path = tmp_path / f"{kind}{run}.fxln"
            if kind == "train":
                argv = ["train", "--config", str(cfg), "--seed", "5", "--checkpoint", str(path),
                        "--out", str(tmp_path / "t.json")]
            else:
                argv = ["verify", "--config", str(cfg), "--seed", "5", "--checkpoint", str(path),
                        "--out", str(tmp_path / "v.json")]
            assert main(argv) == 0
            blobs[kind, run] = path.read_bytes()
    same_train = blobs["train", 0] == blobs["train", 1]
    same_verify = blobs["verify", 0] == blobs["verify", 1]
    ok = same_train and same_verify
    acceptance(10, "determinism", ok,
               f"train checkpoints identical: {same_train}; verify checkpoints identical: "
               f"{same_verify} ({len(blobs['train', 0])} bytes)")
    assert ok
