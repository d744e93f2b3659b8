# coding: utf-8

# # Integer MAC datapath
#
# Multiplying two log values is an exponent add.  Converting the product back
# to fixed point splits the exponent sum p into a quotient (a shift) and a
# remainder (a small lookup table of 2 ** (-r / gamma)).

import numpy as np

from lnskit.datapath import (
    MacConfig, ProductTerm, build_remainder_lut, exact_convert, hybrid_error_table, mac_lanes, tally,
)
from lnskit.format import LnsFormat

fmt = LnsFormat(8, 8)
lut = build_remainder_lut(fmt)
print("remainder LUT:", lut.entries)
print("p=13 ->", exact_convert(ProductTerm(1, 13), fmt), "=", exact_convert(ProductTerm(1, 13), fmt) / 2**23)

# A 32-lane dot product: lanes are shifted, summed per remainder bin, and each
# bin sum is multiplied once by its LUT constant.

rng = np.random.default_rng(1)
ea, eb = rng.integers(0, 128, 32), rng.integers(0, 128, 32)
sa, sb = rng.choice([-1, 1], 32), rng.choice([-1, 1], 32)
zeros = np.zeros(32, dtype=bool)
acc, sat = mac_lanes(ea, sa, zeros, eb, sb, zeros, MacConfig(fmt, accumulator_bits=32))
real = np.sum(sa * sb * np.exp2(-(ea + eb) / 8))
print("datapath:", acc / 2**23, " real:", real, " error (ULP):", abs(acc - real * 2**23))

# 1 + 0.5 does not fit a 24-bit accumulator with 23 fractional bits.

one_half = [np.array([0, 8]), np.array([1, 1]), np.zeros(2, bool)]
for bits in (24, 32):
    a, s = mac_lanes(*one_half, np.array([0, 0]), np.array([1, 1]), np.zeros(2, bool), MacConfig(fmt, accumulator_bits=bits))
    print(f"acc={bits}: {int(a):#x} saturated={bool(s)}")

# Hybrid conversion trades LUT entries for a linear (Mitchell) estimate of the
# low remainder bits.

for b_m, err in hybrid_error_table(fmt).items():
    print(f"b_m={b_m}  LUT entries={2**b_m}  worst relative error={err:.4f}")

for conv in ("exact", "hybrid:1"):
    print(conv, tally(1, 32, fmt, conv).to_dict())
