"""Executable invariants: form equivalence, temporal identities, phase safety,
continuation, constant-size caches, gradients.

Each ``check_*`` returns a :class:`CheckResult`; :func:`run_suites` runs the
standard set on fresh random weights.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernel
from .config import ModelConfig
from .kernel import DecaySpec
from .model import PAD, FuXiLinear, InteractionSequence, collate
from .runtime import decode_step, prefill, readout
from .temporal import TemporalChannel, phase
from .tensor import Tensor, check_gradient, no_grad

__all__ = [
    "CheckResult",
    "VerifyReport",
    "perturb",
    "random_sequence",
    "check_kernel_forms",
    "check_model_forms",
    "check_temporal_factorization",
    "check_phase_float32",
    "check_continuation",
    "check_cache_size",
    "check_gradients",
    "check_zero_input",
    "check_decay_examples",
    "run_suites",
]


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    tolerance: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name}: {self.value:.3g} (tol {self.tolerance:g}) {self.detail}".rstrip()


@dataclass
class VerifyReport:
    results: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def to_dict(self) -> dict:
        return {"passed": self.passed,
                "checks": [{"name": r.name, "passed": r.passed, "value": r.value,
                            "tolerance": r.tolerance, "detail": r.detail}
                           for r in self.results]}


def _under(name, value, tol, detail="") -> CheckResult:
    value = float(value)
    return CheckResult(name, bool(np.isfinite(value) and value <= tol), value, tol, detail)


# -- fixtures ---------------------------------------------------------------------

def perturb(model: FuXiLinear, rng: np.random.Generator, scale: float = 0.3) -> FuXiLinear:
    """Move every parameter to a generic point (nonzero blends, O(1) weights)."""
    for p in model.parameters():
        p.data = np.asarray(p.data + scale * rng.standard_normal(p.shape), dtype=p.dtype)
    model.item_emb.data[PAD] = 0.0
    return model


def random_sequence(rng: np.random.Generator, cfg: ModelConfig, length: int,
                    max_gap: int = 5000) -> InteractionSequence:
    """A padded sequence of ``length`` valid items with a held-out last target."""
    n = cfg.n
    items = rng.integers(1, cfg.vocab, length + 1)
    times = 1_600_000_000 + np.cumsum(rng.integers(0, max_gap, length + 1))
    seq_items = np.zeros(n, np.int64)
    seq_times = np.full(n, times[length - 1], np.int64)
    valid = np.zeros(n, bool)
    tgt = np.zeros(n, np.int64)
    tgt_t = np.full(n, times[length], np.int64)
    seq_items[:length], seq_times[:length], valid[:length] = items[:length], times[:length], True
    tgt[:length], tgt_t[:length] = items[1:], times[1:]
    return InteractionSequence(seq_items, seq_times, valid, tgt, tgt_t)


# -- kernel -----------------------------------------------------------------------

def _random_decay(rng, heads: int, n: int, per_step: bool) -> DecaySpec:
    if per_step:
        g = rng.uniform(0.0, 1.0, (heads, n))
        g[rng.random((heads, n)) < 0.05] = 1.0
        g[rng.random((heads, n)) < 0.02] = 0.0
        return DecaySpec.steps(g)
    g = rng.uniform(0.0, 1.0, (heads, 1))
    g[rng.random((heads, 1)) < 0.1] = 1.0
    return DecaySpec.constant(g)


def check_kernel_forms(configs: int = 100, tol: float = 1e-10, seed: int = 0,
                       max_n: int = 256) -> CheckResult:
    """Parallel, recurrent and chunkwise forms agree on random configurations."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for c in range(configs):
        n = int(rng.integers(1, max_n + 1))
        dk, dv = int(rng.integers(1, 65)), int(rng.integers(1, 65))
        heads = int(rng.integers(1, 4))
        chunk = int(rng.integers(1, n + 1))
        Q = Tensor(rng.standard_normal((heads, n, dk)))
        K = Tensor(rng.standard_normal((heads, n, dk)))
        V = Tensor(rng.standard_normal((heads, n, dv)))
        decay = _random_decay(rng, heads, n, per_step=bool(c % 2))
        ref = kernel.parallel_form(Q, K, V, decay).data
        rec, _ = kernel.recurrent_form(Q, K, V, decay)
        chk, _ = kernel.chunkwise_form(Q, K, V, decay, chunk)
        worst = max(worst, np.abs(rec.data - ref).max(), np.abs(chk.data - ref).max())
    return _under("kernel three-form equivalence", worst, tol, f"{configs} configs")


def check_model_forms(cfg: ModelConfig, tol: float = 1e-8, seed: int = 0,
                      batch: int = 3) -> CheckResult:
    rng = np.random.default_rng(seed)
    model = perturb(FuXiLinear(cfg, seed=seed), rng)
    seqs = [random_sequence(rng, cfg, int(rng.integers(1, cfg.n + 1))) for _ in range(batch)]
    b = collate(seqs)
    with no_grad():
        ref = model.forward(b, "parallel").data
        worst = max(np.abs(model.forward(b, m).data - ref).max()
                    for m in ("chunkwise", "recurrent"))
    return _under("model three-form equivalence", worst, tol)


# -- temporal ---------------------------------------------------------------------

def _temporal_oracle(ch: TemporalChannel, t_query, t_key, h: int):
    """Exact-phase reference for the decayed sinusoid of head pair ``h``."""
    dt = np.asarray(t_query, np.int64) - np.asarray(t_key, np.int64)
    P = int(ch.periods[h])
    ang = 2 * np.pi * ((dt % P) / P)
    lr = -np.logaddexp(0.0, float(ch.log_r.data[h]))
    decay = np.exp(dt / ch.time_scale * lr)
    return decay * np.sin(ang), decay * np.cos(ang)


def check_temporal_factorization(pairs: int = 10_000, tol: float = 1e-10, seed: int = 0,
                                 max_dt: int = 10**6) -> CheckResult:
    """q.k.decay equals r^(dt/tau) {sin, cos}(dt theta) for pairs and full sequences."""
    rng = np.random.default_rng(seed)
    ch = TemporalChannel(8, [8, 64, 512, 4096], rng, time_scale=1.0, dtype=np.float64)
    # slow decays so that weights stay visible across dt up to 1e6
    ch.log_r.data = np.log(np.expm1(rng.uniform(1e-8, 3e-6, ch.H_t)))
    worst = 0.0
    # single pairs straight from the query/key construction
    dts = np.concatenate([[0, 1], np.unique(np.geomspace(1, max_dt, 200).astype(np.int64))])
    for _ in range(pairs // 2):
        t_key = int(rng.integers(0, 2 * 10**9))
        dt = int(rng.choice(dts)) if rng.random() < 0.2 else int(rng.integers(0, max_dt + 1))
        mid = t_key + int(rng.integers(0, dt + 1))
        h = int(rng.integers(0, ch.H_t))
        q_sin, q_cos, k, _ = ch.temporal_qk(t_key + dt, mid, h)
        _, _, _, gamma = ch.temporal_qk(mid, mid, h, t_key_prev=t_key)
        _, _, k0, _ = ch.temporal_qk(t_key, t_key, h)
        ref_s, ref_c = _temporal_oracle(ch, t_key + dt, t_key, h)
        worst = max(worst, abs(q_sin @ k0 * gamma - ref_s), abs(q_cos @ k0 * gamma - ref_c))
    # whole sequences through the same Q, K, D the channel feeds the kernel
    done = pairs // 2
    while done < pairs:
        n = 64
        ts = 10**9 + np.cumsum(rng.integers(0, 2 * max_dt // n, n))
        tn = np.append(ts[1:], ts[-1] + int(rng.integers(0, 1000)))
        W = ch.attention_weights(ts, tn)
        i, j = np.tril_indices(n)
        for h in range(ch.H_t):
            ref_s, ref_c = _temporal_oracle(ch, tn[i], ts[j], h)
            worst = max(worst, np.abs(W[2 * h][i, j] - ref_s).max(),
                        np.abs(W[2 * h + 1][i, j] - ref_c).max())
        done += len(i)
    return _under("temporal sin/cos factorization", worst, tol, f"{pairs}+ pairs, dt <= {max_dt}")


def check_phase_float32(t0: int = 10**9, periods=(8, 64, 512, 4096), tol: float = 1e-6,
                        naive_min: float = 1e-2, samples: int = 10_000) -> CheckResult:
    """Integer-modulus phase is accurate in float32; the naive product is not."""
    rng = np.random.default_rng(0)
    t = t0 + rng.integers(0, 10**6, samples)
    worst = naive = 0.0
    for P in periods:
        exact = 2 * np.pi * ((t % P) / P)
        a = phase(t, P, np.float32)
        b = t.astype(np.float32) * np.float32(2 * np.pi / P)
        for f in (np.sin, np.cos):
            worst = max(worst, np.abs(f(a).astype(np.float64) - f(exact)).max())
            naive = max(naive, np.abs(f(b).astype(np.float64) - f(exact)).max())
    res = _under("float32 phase at t=1e9", worst, tol, f"naive error {naive:.2e}")
    if naive <= naive_min:
        res.passed = False
        res.detail += f" (naive error should exceed {naive_min:g})"
    return res


# -- runtime ---------------------------------------------------------------------

def check_continuation(cfg: ModelConfig, tol: float = 1e-8, seed: int = 0) -> CheckResult:
    """prefill(k) + decode equals a from-scratch recurrent run and the parallel row."""
    rng = np.random.default_rng(seed)
    model = perturb(FuXiLinear(cfg, seed=seed), rng)
    k = cfg.n - 1
    items = rng.integers(1, cfg.vocab, k + 1)
    times = 1_600_000_000 + np.cumsum(rng.integers(0, 5000, k + 1))
    t_query = int(times[-1]) + 777
    cache = prefill((items[:k], times[:k]), model)
    _, _, cache = decode_step(cache, items[k], times[k], t_query, model)
    h = readout(cache, t_query, model)
    t_next = np.append(times[1:], t_query)
    full = InteractionSequence(items, times, np.ones(k + 1, bool), np.append(items[1:], PAD), t_next)
    with no_grad():
        par = model.forward(full, "parallel").data[-1]
        states = model.init_states()
        for i in range(k + 1):
            states, x = model.step(states, items[i], i, times[i], t_next[i])
    worst = max(np.abs(h - par).max(), np.abs(h - x.data).max())
    return _under("prefill+decode continuation", worst, tol)


def check_cache_size(cfg: ModelConfig, short: int = 10, long: int | None = None,
                     seed: int = 0) -> CheckResult:
    long = cfg.n if long is None else long
    rng = np.random.default_rng(seed)
    model = FuXiLinear(cfg, seed=seed)
    sizes = []
    for length in (short, long):
        items = rng.integers(1, cfg.vocab, length)
        times = np.cumsum(rng.integers(0, 100, length))
        sizes.append(prefill((items, times), model).nbytes)
    return CheckResult("constant session cache size", sizes[0] == sizes[1],
                       float(sizes[1] - sizes[0]), 0.0,
                       f"{sizes[0]} bytes at {short} items, {sizes[1]} at {long}")


def check_gradients(cfg: ModelConfig, tol: float = 1e-4, seed: int = 0,
                    batch: int = 2) -> CheckResult:
    """Finite differences against backprop for every parameter of the loss."""
    if cfg.dtype != np.float64:
        raise ValueError("gradient checks need float64")
    rng = np.random.default_rng(seed)
    model = perturb(FuXiLinear(cfg, seed=seed), rng)
    b = collate(random_sequence(rng, cfg, cfg.n, max_gap=20) for _ in range(batch))
    neg = rng.integers(1, cfg.vocab, (batch, cfg.neg_samples))
    err = check_gradient(lambda: model.loss(b, negatives=neg, mode="parallel"),
                         model.parameters())
    return _under("finite-difference gradient", err, tol, f"{model.num_parameters()} params")


def check_zero_input(cfg: ModelConfig, seed: int = 0) -> CheckResult:
    model = FuXiLinear(cfg, seed=seed)
    X = np.zeros((cfg.n, cfg.d), cfg.dtype)
    ts = np.arange(cfg.n, dtype=np.int64)
    with no_grad():
        out = model.blocks[0].forward(X, ts, ts, "chunkwise", cfg.C).data
    return _under("zero input gives zero block output", np.abs(out).max(), 0.0)


def check_decay_examples() -> CheckResult:
    cases = [
        (DecaySpec.constant(0.5), 3, [[1, 0, 0], [.5, 1, 0], [.25, .5, 1]]),
        (DecaySpec.constant(0.0), 3, np.eye(3)),
        (DecaySpec.steps([1.0, 0.5, 0.1]), 3, [[1, 0, 0], [.5, 1, 0], [.05, .1, 1]]),
    ]
    worst = max(np.abs(kernel.build_decay_matrix(d, n).data - np.asarray(ref)).max()
                for d, n, ref in cases)
    return _under("decay matrix examples", worst, 1e-15)


# -- suites -----------------------------------------------------------------------

def run_suites(cfg: ModelConfig | None = None, precision: str = "float64", seed: int = 0,
               configs: int = 100) -> VerifyReport:
    """Standard invariant suites on fresh random weights."""
    if cfg is None:
        cfg = ModelConfig(n=24, d=16, L=2, H=2, H_t=2, d_p=8, d_ffn=32, C=8, vocab=40,
                          neg_samples=8, time_scale=3600.0)
    cfg = cfg.replace(precision=precision, seed=seed)
    micro = ModelConfig(n=4, d=8, L=1, H=2, H_t=2, d_p=4, d_ffn=16, C=2, vocab=12,
                        neg_samples=5, time_scale=1.0, B=4, precision="float64", seed=seed)
    f64 = precision == "float64"
    report = VerifyReport()
    report.results.append(check_decay_examples())
    report.results.append(check_kernel_forms(configs, 1e-10, seed))
    report.results.append(check_model_forms(cfg, 1e-8 if f64 else 1e-3, seed))
    report.results.append(check_temporal_factorization(seed=seed))
    report.results.append(check_phase_float32())
    report.results.append(check_continuation(cfg, 1e-8 if f64 else 1e-3, seed))
    report.results.append(check_cache_size(cfg, seed=seed))
    report.results.append(check_zero_input(cfg, seed))
    report.results.append(check_gradients(micro, 1e-4, seed))
    return report
