"""
What the periodic temporal channel buys
=======================================

On synthetic data where the next item depends on the position within a
fixed period, compare three models trained identically: the full model, one
whose temporal channel only decays with elapsed time, and one without the
temporal channel. Each trains for 2,000 steps, about six minutes in all on
one core; the full model only pulls ahead once it has learned the phase,
which takes several hundred steps.
"""
import time

from fuxi_linear.ablation import default_setup, run_ablation

spec, cfg, tcfg = default_setup()
print(f"{spec.users} users, {spec.items} items, period {spec.period}, {tcfg.steps} steps")

###############################################################################
# Train and evaluate the three variants
# -------------------------------------

t0 = time.perf_counter()
res = run_ablation(spec, cfg, tcfg)
for name in res.metrics:
    print(f"{name:15s} HR@10 {res.hr(name):.4f}  HR@50 {res.hr(name, 50):.4f}  "
          f"({res.seconds[name]:.0f}s)")
print(f"full / no temporal = {res.hr('full') / res.hr('no_temporal'):.2f}  "
      f"[{time.perf_counter() - t0:.0f}s total]")
