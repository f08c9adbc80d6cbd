"""
Serving a session with a fixed-size cache
=========================================

Train a small model on synthetic periodic data, then serve one user: prefill
their history into a cache, and feed new interactions one at a time. The
cache never grows, and each step matches a full recomputation to float32 rounding.
"""
import numpy as np

from fuxi_linear.config import ModelConfig, TrainConfig
from fuxi_linear.data import SyntheticSpec, evaluate, leave_last_out, synthesize_periodic
from fuxi_linear.model import FuXiLinear, InteractionSequence
from fuxi_linear.runtime import decode_step, prefill, readout
from fuxi_linear.training import train

spec = SyntheticSpec(users=300, items=64, interactions_per_user=40, period=64, buckets=8,
                     groups=4, seed=1)
ds = synthesize_periodic(spec)
cfg = ModelConfig(n=32, d=32, L=2, H=2, H_t=2, d_p=16, d_ffn=64, C=16, vocab=ds.vocab,
                  neg_samples=32, time_scale=1.0)
train_set, test_set = leave_last_out(ds.histories, cfg.n)

###############################################################################
# A short training run
# --------------------

model = FuXiLinear(cfg)
losses = train(model, train_set, TrainConfig(steps=300, batch_size=32, lr=3e-3, warmup=30,
                                             log_every=0))
print(f"loss {losses[0]:.2f} -> {np.mean(losses[-20:]):.2f}")
print("held-out", evaluate(model, test_set, (10,)).to_dict())

###############################################################################
# Prefill, then decode
# --------------------

h = ds.histories[0]
cache = prefill((h.items[:20], h.timestamps[:20]), model)
print(f"cache after 20 items: {cache.nbytes} bytes")
for j in range(20, 26):
    t_next = int(h.timestamps[j + 1])
    ranked, scores, cache = decode_step(cache, h.items[j], h.timestamps[j], t_next, model,
                                        top_k=5)
    hit = "hit" if h.items[j + 1] in ranked else "miss"
    print(f"step {j}: top-5 {ranked.tolist()}  next {h.items[j + 1]} ({hit}), "
          f"cache {cache.nbytes} bytes")

###############################################################################
# Agreement with a full parallel pass
# -----------------------------------

k = 26
t_q = int(h.timestamps[k])
seq = InteractionSequence(h.items[:k], h.timestamps[:k], np.ones(k, bool),
                          np.append(h.items[1:k], 0), np.append(h.timestamps[1:k], t_q))
full = model.forward(seq, mode="parallel").data[-1]
print(f"max |cache readout - parallel| = {np.abs(readout(cache, t_q, model) - full).max():.1e}")
