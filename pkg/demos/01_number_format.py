# coding: utf-8

# # The multi-base log format
#
# A value is stored as a sign, an integer exponent and a zero flag:
# x = sign * s * 2 ** (-e / gamma), where s is the largest magnitude in the
# group and gamma (the base factor) sets how finely the exponent line is cut.

import numpy as np

from lnskit.format import LnsFormat, QuantizerConfig, Role, decode, log_quantize, quantize_tensor

fmt = LnsFormat(8, 8)
print(fmt, "largest exponent:", fmt.max_exponent, "dynamic range (octaves):", fmt.dynamic_range)

# Quantizing 3.0 inside a group whose max is 4.0 gives exponent 3.

v = log_quantize(3.0, fmt, 4.0)
print(v, decode(v, fmt, 4.0))

# Larger gamma shrinks the gap between neighbours but also the range an
# 8-bit exponent can cover.

for gamma in (1, 2, 8, 32):
    f = LnsFormat(8, gamma)
    print(f"gamma={gamma:3d}  gap={f.gap:.5f}  range=2**-{f.dynamic_range:.3f}")

# Relative error of a whole tensor is bounded by half a gap in log space.

rng = np.random.default_rng(0)
x = np.exp2(rng.uniform(-12, 0, size=100_000))
y = quantize_tensor(x, QuantizerConfig(Role.QW, fmt)).decode()
print("worst |log2(y/x)|:", np.abs(np.log2(y / x)).max(), "half gap:", 0.5 / fmt.gamma)

# Per-channel scales give each output row of a weight matrix its own maximum.

w = rng.normal(size=(3, 5)) * np.array([[1.0], [0.01], [100.0]])
t = quantize_tensor(w, QuantizerConfig(Role.QW, fmt, granularity="per-channel"))
print(t.scales.ravel())
print(np.round(t.decode() / w, 3))
