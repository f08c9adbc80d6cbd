"""
Periodic phases of epoch timestamps in 32-bit floats
====================================================

A timestamp near 1e9 seconds has no fractional precision left in float32,
so ``sin(2 pi t / P)`` computed naively is mostly noise. Reducing ``t``
modulo the integer period first keeps the phase accurate.
"""
import numpy as np

from fuxi_linear.temporal import phase

t = 1_700_000_000 + np.arange(0, 200_000, 997, dtype=np.int64)

###############################################################################
# Compare against a float64 reference for a few periods
# -----------------------------------------------------

for P in (8, 64, 512, 4096):
    ref = np.sin(phase(t, P, np.float64))
    reduced = np.sin(phase(t, P, np.float32))
    naive = np.sin(np.float32(2 * np.pi) * t.astype(np.float32) / np.float32(P))
    print(f"P={P:5d}  reduced err {np.abs(reduced - ref).max():.1e}   "
          f"naive err {np.abs(naive - ref).max():.1e}")

###############################################################################
# The sine/cosine factorization
# -----------------------------
# The temporal score between a query at ``tq`` and a key at ``tk`` is a
# function of the gap only, yet it is computed as a dot product of a
# query-side vector and a key-side vector. The built-in check compares the
# two on 10,000 random pairs.

from fuxi_linear.verify import check_temporal_factorization

print(check_temporal_factorization(pairs=10_000, tol=1e-10))
