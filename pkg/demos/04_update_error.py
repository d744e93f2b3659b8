# coding: utf-8

# # How much does quantizing an update cost?
#
# After an update the new weight must be rounded back onto the log grid.  For
# a multiplicative update the log-space displacement is eta * g, so the
# rounding error scales with eta / gamma.  An additive update moves
# log2|w| by an amount that depends on the weight itself.

import numpy as np

from lnskit import error_analysis as ea

rng = np.random.default_rng(0)
w = ea.log_uniform_weights(1024, rng, 1024)
g = rng.normal(0, 1e-4, size=1024)
for algo in ("GD", "MUL", "SIGN_MUL"):
    rec = ea.check_theorem_bound(algo, w, g, 2.0**-6, 1024, 128, rng)
    print(f"{algo:9s} mean error {rec.mean_r:.3e}  bound {rec.bound:.3e}  unchanged {rec.zeroed_fraction:.2f}")

# The multiplicative error is linear in eta and in 1/gamma.

by_eta = ea.run_sweep(ea.SweepSpec(algorithms=("MUL",), trials=64), threads=4)
by_gamma = ea.run_sweep(ea.SweepSpec(eta_grid=(2.0**-6,), gamma_grid=tuple(2**k for k in range(6, 13)),
                                     algorithms=("MUL",), trials=64), threads=4)
print("slope vs eta:", round(ea.scaling_slope(by_eta, "eta"), 3))
print("slope vs 1/gamma:", round(ea.scaling_slope(by_gamma, "gamma"), 3))
print(ea.records_to_csv(by_eta))

# Stochastic rounding is unbiased; its squared error is sum q (1 - q).

x = rng.uniform(-4, 4, size=100)
c = ea.check_sr_bound(x, 10_000, rng)
print(f"measured {c.mean_sq_err:.3f}  analytic {c.analytic:.3f}  bound {c.bound:.1f}")
