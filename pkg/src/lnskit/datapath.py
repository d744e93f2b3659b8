"""Bit-accurate model of an LNS vector MAC unit.

Multiplying two LNS values adds their exponents and XORs their signs.  The
product ``2 ** (-p / gamma)`` is converted to fixed point by splitting ``p``
into a quotient ``q = p >> b`` (a right shift) and a remainder
``r = p & (gamma - 1)`` (a LUT lookup).  The vector unit shifts a unit value by
each lane's quotient, sums the shifted values per remainder bin in adder trees,
multiplies each bin sum by its LUT constant and accumulates the products into
a saturating partial sum.

All fixed-point values are Python ints or ``int64`` arrays with ``F``
fractional bits.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError
from .format import LnsFormat, LnsScalar, LnsTensor, QuantizerConfig, log_quantize


class Routing(str, enum.Enum):
    """Which tensors feed BufferA / BufferB in each computation pass."""

    FORWARD = "forward"  # weight, input activation
    BACKWARD_INPUT = "backward-input"  # weight, output gradient
    BACKWARD_WEIGHT = "backward-weight"  # input activation, output gradient


BUFFER_MAP = {
    Routing.FORWARD: ("weight", "input_activation"),
    Routing.BACKWARD_INPUT: ("weight", "output_gradient"),
    Routing.BACKWARD_WEIGHT: ("input_activation", "output_gradient"),
}


@dataclass(frozen=True)
class ProductTerm:
    sign: int
    exponent_sum: int
    is_zero: bool = False


@dataclass(frozen=True)
class HybridSplit:
    b_m: int
    b_l: int

    @classmethod
    def for_format(cls, fmt: LnsFormat, b_m: int) -> "HybridSplit":
        if not 0 <= b_m <= fmt.b:
            raise ConfigError(f"b_m={b_m} outside [0, {fmt.b}]")
        return cls(b_m, fmt.b - b_m)

    @property
    def lut_size(self) -> int:
        return 1 << self.b_m


@dataclass(frozen=True)
class RemainderLut:
    entries: tuple
    fractional_bits: int

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, r):
        return self.entries[r]


@dataclass(frozen=True)
class MacConfig:
    format: LnsFormat = field(default_factory=lambda: LnsFormat(8, 8))
    vector_size: int = 32
    input_bitwidth: int = 8
    accumulator_bits: int = 24
    fractional_bits: int = 23

    def __post_init__(self):
        if self.input_bitwidth != self.format.bitwidth:
            raise ConfigError("input_bitwidth must equal the format bitwidth")
        if not 0 <= self.fractional_bits <= 30:
            raise ConfigError("fractional_bits must be in [0, 30]")
        if self.vector_size < 1:
            raise ConfigError("vector_size must be positive")
        if self.accumulator_bits < 2 or self.accumulator_bits > 62:
            raise ConfigError("accumulator_bits must be in [2, 62]")

    @property
    def remainder_bins(self) -> int:
        return self.format.gamma

    @property
    def acc_max(self) -> int:
        return (1 << (self.accumulator_bits - 1)) - 1

    @property
    def acc_min(self) -> int:
        return -(1 << (self.accumulator_bits - 1)) + 1


@dataclass(frozen=True)
class PartialSum:
    value: int = 0
    fractional_bits: int = 23
    accumulator_bits: int = 24
    saturated: bool = False

    def to_real(self) -> float:
        return self.value / (1 << self.fractional_bits)

    def hex(self) -> str:
        return format_hex(self.value)


def format_hex(v: int) -> str:
    return f"-0x{-v:X}" if v < 0 else f"0x{v:X}"


# ---------------------------------------------------------------------------
# scalar operations


def lns_multiply(a: LnsScalar, b: LnsScalar, fmt_a=None, fmt_b=None) -> ProductTerm:
    if fmt_a is not None and fmt_b is not None and fmt_a != fmt_b:
        raise ConfigError(f"operand formats differ: {fmt_a} vs {fmt_b}")
    if a.is_zero or b.is_zero:
        return ProductTerm(1, 0, True)
    return ProductTerm(a.sign * b.sign, a.exponent + b.exponent)


def build_remainder_lut(fmt: LnsFormat, F: int = 23) -> RemainderLut:
    """``round(2**F * 2**(-r/gamma))`` for every remainder ``r``."""
    if F > 30:
        raise ConfigError("F must be <= 30")
    g = fmt.gamma
    entries = tuple(int(np.rint(2.0**F * 2.0 ** (-r / g))) for r in range(g))
    return RemainderLut(entries, F)


def _msb_lut(fmt: LnsFormat, split: HybridSplit, F: int) -> RemainderLut:
    step = 1 << split.b_l
    g = fmt.gamma
    entries = tuple(
        int(np.rint(2.0**F * 2.0 ** (-(m * step) / g))) for m in range(split.lut_size)
    )
    return RemainderLut(entries, F)


def _mitchell(r_l: int, b: int, F: int) -> int:
    # chord of 2**-x on [0, 1]: 2**-x ~= 1 - x/2, exact at both ends
    if r_l == 0:
        return 1 << F
    return (1 << F) - (r_l << (F - b - 1))


def exact_convert(p: ProductTerm, fmt: LnsFormat, F: int = 23, lut: Optional[RemainderLut] = None) -> int:
    if p.is_zero:
        return 0
    lut = lut or build_remainder_lut(fmt, F)
    q = p.exponent_sum >> fmt.b
    r = p.exponent_sum & (fmt.gamma - 1)
    if q >= F:
        return 0
    return p.sign * (lut[r] >> q)


def hybrid_convert(p: ProductTerm, fmt: LnsFormat, split: HybridSplit, F: int = 23) -> int:
    """LSB remainder bits by a Mitchell chord, MSB bits by a ``2**b_m`` entry LUT."""
    if split.b_m + split.b_l != fmt.b:
        raise ConfigError("hybrid split must cover all remainder bits")
    if split.b_l and F < fmt.b + 1:
        raise ConfigError("F too small for the Mitchell term")
    if p.is_zero:
        return 0
    q = p.exponent_sum >> fmt.b
    r = p.exponent_sum & (fmt.gamma - 1)
    if q >= F:
        return 0
    r_m, r_l = r >> split.b_l, r & ((1 << split.b_l) - 1)
    lut = _msb_lut(fmt, split, F)
    v = (_mitchell(r_l, fmt.b, F) * lut[r_m]) >> F
    return p.sign * (v >> q)


def hybrid_error_table(fmt: LnsFormat, F: int = 23) -> dict[int, float]:
    """Worst relative error of hybrid vs exact conversion over all remainders, per ``b_m``."""
    table = {}
    for b_m in range(fmt.b + 1):
        split = HybridSplit.for_format(fmt, b_m)
        worst = 0.0
        for r in range(fmt.gamma):
            p = ProductTerm(1, r)
            ex = exact_convert(p, fmt, F)
            hy = hybrid_convert(p, fmt, split, F)
            worst = max(worst, abs(hy - ex) / ex)
        table[b_m] = worst
    return table


def _sat_add(acc: int, x: int, lo: int, hi: int):
    s = acc + x
    if s > hi:
        return hi, True
    if s < lo:
        return lo, True
    return s, False


def accumulate(ps: PartialSum, addend: PartialSum) -> PartialSum:
    if (ps.fractional_bits, ps.accumulator_bits) != (addend.fractional_bits, addend.accumulator_bits):
        raise ConfigError("partial sums use different fixed-point parameters")
    hi = (1 << (ps.accumulator_bits - 1)) - 1
    v, sat = _sat_add(ps.value, addend.value, -hi, hi)
    return PartialSum(v, ps.fractional_bits, ps.accumulator_bits, ps.saturated or addend.saturated or sat)


# ---------------------------------------------------------------------------
# vector unit


def _conversion_split(conversion, fmt: LnsFormat) -> Optional[HybridSplit]:
    if conversion in (None, "exact"):
        return None
    if isinstance(conversion, HybridSplit):
        return conversion
    if isinstance(conversion, str) and conversion.startswith("hybrid:"):
        return HybridSplit.for_format(fmt, int(conversion.split(":", 1)[1]))
    raise ConfigError(f"unknown conversion {conversion!r}")


def _lane_values(e_sum, sign, zero, fmt: LnsFormat, F: int, split: Optional[HybridSplit]):
    """Stage 2: signed shifted unit value and bin index for every lane (vectorized)."""
    q = e_sum >> fmt.b
    r = e_sum & (fmt.gamma - 1)
    if split is None:
        unit = np.full(e_sum.shape, 1 << F, dtype=np.int64)
        bins = r
    else:
        r_l = r & ((1 << split.b_l) - 1)
        unit = (1 << F) - (r_l << max(F - fmt.b - 1, 0)) if split.b_l else np.full(e_sum.shape, 1 << F, dtype=np.int64)
        bins = r >> split.b_l
    live = (~zero) & (q < F)
    shifted = np.where(live, unit >> np.minimum(q, 62), 0)
    return np.where(sign < 0, -shifted, shifted), bins


def _bin_luts(fmt: LnsFormat, F: int, split: Optional[HybridSplit]) -> np.ndarray:
    lut = build_remainder_lut(fmt, F) if split is None else _msb_lut(fmt, split, F)
    return np.array(lut.entries, dtype=np.int64)


def mac_lanes(ea, sa, za, eb, sb, zb, cfg: MacConfig, conversion="exact", acc=None, sat=None):
    """Process one vector of up to ``cfg.vector_size`` lanes for a batch of outputs.

    All lane arrays have shape ``(..., lanes)``.  ``acc``/``sat`` carry a running
    partial sum across calls.  Returns the updated ``(acc, sat)`` int64/bool arrays.
    """
    fmt, F = cfg.format, cfg.fractional_bits
    if ea.shape[-1] > cfg.vector_size:
        raise ConfigError(f"{ea.shape[-1]} lanes exceed vector size {cfg.vector_size}")
    split = _conversion_split(conversion, fmt)
    # stage 1: exponent add, sign xor
    e_sum = ea.astype(np.int64) + eb.astype(np.int64)
    sign = sa.astype(np.int64) * sb.astype(np.int64)
    zero = za | zb
    # stage 2: shift and route to bins
    lanes, bins = _lane_values(e_sum, sign, zero, fmt, F, split)
    luts = _bin_luts(fmt, F, split)
    out_shape = lanes.shape[:-1]
    if acc is None:
        acc = np.zeros(out_shape, dtype=np.int64)
        sat = np.zeros(out_shape, dtype=bool)
    hi = cfg.acc_max
    # stage 3: per-bin tree sums, constant multiply (truncate toward zero), accumulate
    for k, c in enumerate(luts):
        tree = np.where(bins == k, lanes, 0).sum(axis=-1)
        prod = np.sign(tree) * ((np.abs(tree) * c) >> F)
        s = acc + prod
        sat |= (s > hi) | (s < -hi)
        acc = np.clip(s, -hi, hi)
    return acc, sat


def _as_lane_arrays(x):
    if isinstance(x, LnsTensor):
        return x.exponent, x.sign, x.zero, x.fmt
    scalars = list(x)
    e = np.array([0 if v.is_zero else v.exponent for v in scalars], dtype=np.int64)
    s = np.array([v.sign for v in scalars], dtype=np.int64)
    z = np.array([v.is_zero for v in scalars], dtype=bool)
    return e, s, z, None


def mac_dot_product(a, b, cfg: MacConfig = MacConfig(), conversion="exact") -> PartialSum:
    """Pre-scale dot product of two LNS vectors (``LnsTensor`` or scalar lists)."""
    ea, sa, za, fa = _as_lane_arrays(a)
    eb, sb, zb, fb = _as_lane_arrays(b)
    for f in (fa, fb):
        if f is not None and f != cfg.format:
            raise ConfigError(f"operand format {f} does not match MAC format {cfg.format}")
    if ea.shape != eb.shape:
        raise ConfigError("operand slices differ in length")
    acc, sat = mac_lanes(ea.ravel(), sa.ravel(), za.ravel(), eb.ravel(), sb.ravel(), zb.ravel(), cfg, conversion)
    return PartialSum(int(acc), cfg.fractional_bits, cfg.accumulator_bits, bool(sat))


def mac_matmul(x: LnsTensor, w: LnsTensor, cfg: MacConfig, conversion="exact"):
    """``x @ w.T`` in fixed point, chunked into vector-size slices.

    ``x`` is ``(M, K)`` and ``w`` is ``(N, K)``.  Returns ``(values, saturated)``
    where ``values`` is the pre-scale real result ``acc / 2**F`` of shape ``(M, N)``.
    """
    if x.fmt != cfg.format or w.fmt != cfg.format:
        raise ConfigError("operand formats must match the MAC format")
    M, K = x.shape
    N, K2 = w.shape
    if K != K2:
        raise ConfigError(f"inner dimensions differ: {K} vs {K2}")
    acc = sat = None
    for k0 in range(0, K, cfg.vector_size):
        sl = slice(k0, k0 + cfg.vector_size)
        acc, sat = mac_lanes(
            x.exponent[:, None, sl], x.sign[:, None, sl], x.zero[:, None, sl],
            w.exponent[None, :, sl], w.sign[None, :, sl], w.zero[None, :, sl],
            cfg, conversion, acc, sat,
        )
    if acc is None:
        return np.zeros((M, N)), np.zeros((M, N), dtype=bool)
    return acc / float(1 << cfg.fractional_bits), sat


def requantize(ps: PartialSum, out_cfg: QuantizerConfig, s_a: float, s_b: float, s_out: float) -> LnsScalar:
    """Convert a partial sum back to LNS with output scale ``s_out``."""
    if ps.value == 0:
        return LnsScalar.zero()
    return log_quantize(ps.to_real() * s_a * s_b, out_cfg.format, s_out, out_cfg.rounding)


# ---------------------------------------------------------------------------
# operation counts

TALLY_KEYS = ("exp_adds", "xors", "shifts", "tree_adds", "lut_mults", "acc_adds")


@dataclass
class OperationTally:
    counts: dict = field(default_factory=lambda: dict.fromkeys(TALLY_KEYS, 0))

    def __add__(self, other: "OperationTally") -> "OperationTally":
        return OperationTally({k: self.counts[k] + other.counts[k] for k in TALLY_KEYS})

    def __eq__(self, other):
        return isinstance(other, OperationTally) and self.counts == other.counts

    def __getitem__(self, k):
        return self.counts[k]

    def to_dict(self) -> dict:
        return dict(self.counts)


def tally(n_dots: int, vector_size: int = 32, fmt: LnsFormat = LnsFormat(8, 8), conversion="exact") -> OperationTally:
    """Operation counts for ``n_dots`` full-vector dot products."""
    split = _conversion_split(conversion, fmt)
    bins = fmt.gamma if split is None else split.lut_size
    lanes = n_dots * vector_size
    return OperationTally({
        "exp_adds": lanes,
        "xors": lanes,
        "shifts": lanes,
        "tree_adds": lanes,
        "lut_mults": n_dots * bins,
        "acc_adds": n_dots * bins,
    })


def affine_tally(batch: int, fan_in: int, fan_out: int, cfg: MacConfig = MacConfig(),
                 conversion="exact", passes: Sequence[Routing] = tuple(Routing)) -> OperationTally:
    """Tally for one affine layer over the requested passes.

    Each output element of a pass is a dot product chunked into
    ``ceil(length / vector_size)`` vector operations.
    """
    def chunks(n):
        return -(-n // cfg.vector_size)

    shapes = {
        Routing.FORWARD: (batch * fan_out, fan_in),
        Routing.BACKWARD_INPUT: (batch * fan_in, fan_out),
        Routing.BACKWARD_WEIGHT: (fan_out * fan_in, batch),
    }
    total = OperationTally()
    for p in passes:
        outputs, length = shapes[Routing(p)]
        total = total + tally(outputs * chunks(length), cfg.vector_size, cfg.format, conversion)
    return total
