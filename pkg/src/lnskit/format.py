"""Multi-base logarithmic number format and the logarithmic quantizer.

A value is stored as a sign, a non-negative integer exponent ``e`` and a zero
flag, and decodes to ``sign * s * 2 ** (-e / gamma)`` where ``s`` is the scale
of the value's group.  ``gamma`` is a power of two, so the low ``b`` bits of
``e`` are the fractional part and the high bits are the integer part.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, DataError


class Granularity(str, enum.Enum):
    PER_TENSOR = "per-tensor"
    PER_CHANNEL = "per-channel"  # one scale per index of axis 0
    PER_FEATURE = "per-feature"  # one scale per index of the last axis


class Role(str, enum.Enum):
    QW = "QW"
    QA = "QA"
    QE = "QE"
    QG = "QG"
    QU = "QU"
    NONE = "none"


@dataclass(frozen=True)
class LnsFormat:
    bitwidth: int
    gamma: int

    def __post_init__(self):
        if not 2 <= self.bitwidth <= 32:
            raise ConfigError(f"bitwidth must be in [2, 32], got {self.bitwidth}")
        if self.gamma < 1 or self.gamma & (self.gamma - 1):
            raise ConfigError(f"gamma must be a power of two >= 1, got {self.gamma}")

    @property
    def b(self) -> int:
        return self.gamma.bit_length() - 1

    @property
    def exponent_bits(self) -> int:
        return self.bitwidth - 1

    @property
    def max_exponent(self) -> int:
        return (1 << (self.bitwidth - 1)) - 1

    @property
    def dynamic_range(self) -> float:
        """Largest representable ``-log2(|x| / s)``."""
        return self.max_exponent / self.gamma

    @property
    def gap(self) -> float:
        """Multiplicative spacing between neighbouring magnitudes."""
        return 2.0 ** (1.0 / self.gamma)

    def widened(self, bitwidth: int) -> "LnsFormat":
        """Same dynamic range at a larger bitwidth (gamma grows with the extra bits)."""
        if bitwidth < self.bitwidth:
            raise ConfigError(
                f"cannot widen a {self.bitwidth}-bit format to {bitwidth} bits"
            )
        return LnsFormat(bitwidth, self.gamma << (bitwidth - self.bitwidth))


def make_format(bitwidth: int, gamma: int) -> LnsFormat:
    return LnsFormat(int(bitwidth), int(gamma))


@dataclass(frozen=True)
class RoundingMode:
    kind: str = "nearest"
    seed: Optional[int] = None

    def __post_init__(self):
        if self.kind not in ("nearest", "stochastic"):
            raise ConfigError(f"unknown rounding mode {self.kind!r}")

    @classmethod
    def nearest(cls) -> "RoundingMode":
        return cls("nearest")

    @classmethod
    def stochastic(cls, seed: int = 0) -> "RoundingMode":
        return cls("stochastic", seed)

    @property
    def is_stochastic(self) -> bool:
        return self.kind == "stochastic"

    def generator(self) -> np.random.Generator:
        return np.random.default_rng(self.seed)


@dataclass(frozen=True)
class LnsScalar:
    sign: int
    exponent: int
    is_zero: bool = False

    @classmethod
    def zero(cls) -> "LnsScalar":
        return cls(1, 0, True)


@dataclass(frozen=True)
class ScaleFactor:
    s: float
    group: tuple = ("per-tensor",)


@dataclass(frozen=True)
class QuantizerConfig:
    """How one tensor class is quantized.

    ``conversion`` only matters for quantizers whose outputs feed a dot product
    (weights and activations): it picks how the product sums are formed.
    """

    role: Role = Role.NONE
    format: LnsFormat = field(default_factory=lambda: LnsFormat(8, 8))
    rounding: RoundingMode = field(default_factory=RoundingMode)
    granularity: Granularity = Granularity.PER_TENSOR
    conversion: str = "real"  # real | exact | hybrid:<b_m>

    def __post_init__(self):
        object.__setattr__(self, "role", Role(self.role))
        object.__setattr__(self, "granularity", Granularity(self.granularity))
        conv = self.conversion
        if not (conv in ("real", "exact") or conv.startswith("hybrid:")):
            raise ConfigError(f"unknown conversion {conv!r}")
        if conv.startswith("hybrid:"):
            try:
                b_m = int(conv.split(":", 1)[1])
            except ValueError:
                raise ConfigError(f"bad hybrid split in {conv!r}") from None
            if not 0 <= b_m <= self.format.b:
                raise ConfigError(f"hybrid b_m={b_m} outside [0, {self.format.b}]")

    @property
    def active(self) -> bool:
        return self.role is not Role.NONE


# ---------------------------------------------------------------------------
# scalar helpers


def stochastic_round(x, rng: np.random.Generator):
    """Round up with probability equal to the fractional part.

    Works on scalars and arrays.  ``E[stochastic_round(x)] == x``.
    """
    x = np.asarray(x, dtype=np.float64)
    lo = np.floor(x)
    up = rng.random(x.shape) < (x - lo)
    out = (lo + up).astype(np.int64)
    return int(out) if out.ndim == 0 else out


def _round(v: np.ndarray, mode: RoundingMode, rng: Optional[np.random.Generator]):
    if mode.is_stochastic:
        if rng is None:
            rng = mode.generator()
        return stochastic_round(v, rng)
    return np.rint(v).astype(np.int64)  # half-to-even


def log_quantize(
    x: float,
    fmt: LnsFormat,
    s: float,
    mode: RoundingMode = RoundingMode(),
    rng: Optional[np.random.Generator] = None,
) -> LnsScalar:
    s = float(s.s) if isinstance(s, ScaleFactor) else float(s)
    if not s > 0:
        raise DataError(f"scale must be positive, got {s}")
    if not math.isfinite(x):
        raise DataError(f"cannot quantize non-finite value {x}")
    if x == 0:
        return LnsScalar.zero()
    # log difference instead of log2(|x| / s), which can underflow to log2(0)
    v = min(max((math.log2(s) - math.log2(abs(x))) * fmt.gamma, -1.0), fmt.max_exponent + 1.0)
    e = int(np.clip(_round(np.asarray(v), mode, rng), 0, fmt.max_exponent))
    return LnsScalar(1 if x > 0 else -1, e)


def decode(v: LnsScalar, fmt: LnsFormat, s: float) -> float:
    if v.is_zero:
        return 0.0
    s = float(s.s) if isinstance(s, ScaleFactor) else float(s)
    return v.sign * s * 2.0 ** (-v.exponent / fmt.gamma)


# ---------------------------------------------------------------------------
# tensors


def _group_axes(ndim: int, granularity: Granularity) -> tuple:
    if granularity is Granularity.PER_TENSOR or ndim == 0:
        return tuple(range(ndim))
    if granularity is Granularity.PER_CHANNEL:
        return tuple(range(1, ndim))
    return tuple(range(ndim - 1))


def compute_scale(values, granularity=Granularity.PER_TENSOR) -> np.ndarray:
    """Group maxima of ``|values|`` shaped to broadcast against ``values``.

    All-zero groups get scale 1.
    """
    x = np.asarray(values, dtype=np.float64)
    if x.size == 0:
        raise DataError("cannot compute a scale of an empty tensor")
    if not np.all(np.isfinite(x)):
        raise DataError("NaN or Inf in quantizer input")
    axes = _group_axes(x.ndim, Granularity(granularity))
    s = np.max(np.abs(x), axis=axes, keepdims=True) if axes else np.abs(x).copy()
    s[s == 0] = 1.0
    return s


def scale_factors(values, granularity=Granularity.PER_TENSOR) -> list[ScaleFactor]:
    g = Granularity(granularity)
    s = compute_scale(values, g).ravel()
    if g is Granularity.PER_TENSOR:
        return [ScaleFactor(float(s[0]))]
    return [ScaleFactor(float(v), (g.value, i)) for i, v in enumerate(s)]


@dataclass
class LnsTensor:
    """Struct-of-arrays LNS tensor.

    ``scales`` has the same rank as ``exponent`` with singleton axes along the
    grouped dimensions, so ``decode`` is a plain broadcast.
    """

    sign: np.ndarray  # int8, +1 / -1
    exponent: np.ndarray  # int64 in [0, fmt.max_exponent]
    zero: np.ndarray  # bool
    fmt: LnsFormat
    scales: np.ndarray
    granularity: Granularity = Granularity.PER_TENSOR

    @property
    def shape(self) -> tuple:
        return self.exponent.shape

    @property
    def size(self) -> int:
        return self.exponent.size

    def decode(self) -> np.ndarray:
        mag = self.scales * np.exp2(-self.exponent / self.fmt.gamma)
        return np.where(self.zero, 0.0, self.sign * mag)

    def scalar(self, idx) -> LnsScalar:
        if self.zero[idx]:
            return LnsScalar.zero()
        return LnsScalar(int(self.sign[idx]), int(self.exponent[idx]))

    def scale_of(self, idx) -> float:
        idx = np.unravel_index(np.ravel_multi_index(idx, self.shape), self.shape)
        sidx = tuple(0 if n == 1 else i for i, n in zip(idx, self.scales.shape))
        return float(self.scales[sidx])

    def copy(self) -> "LnsTensor":
        return LnsTensor(
            self.sign.copy(), self.exponent.copy(), self.zero.copy(), self.fmt,
            self.scales.copy(), self.granularity,
        )

    def equals(self, other: "LnsTensor") -> bool:
        """Bit-level equality (zero elements compare on the flag only)."""
        if self.fmt != other.fmt or self.shape != other.shape:
            return False
        nz = ~self.zero
        return (
            np.array_equal(self.zero, other.zero)
            and np.array_equal(self.sign[nz], other.sign[nz])
            and np.array_equal(self.exponent[nz], other.exponent[nz])
            and np.array_equal(self.scales, other.scales)
        )


def quantize_array(
    x,
    fmt: LnsFormat,
    scales,
    mode: RoundingMode = RoundingMode(),
    rng: Optional[np.random.Generator] = None,
    granularity=Granularity.PER_TENSOR,
) -> LnsTensor:
    """Quantize ``x`` against precomputed (broadcastable) ``scales``."""
    x = np.asarray(x, dtype=np.float64)
    scales = np.asarray(scales, dtype=np.float64)
    if np.any(scales <= 0):
        raise DataError("scales must be positive")
    if not np.all(np.isfinite(x)):
        raise DataError("NaN or Inf in quantizer input")
    zero = x == 0
    with np.errstate(divide="ignore"):
        v = (np.log2(scales) - np.log2(np.abs(x))) * fmt.gamma
    v = np.clip(np.where(zero, 0.0, v), -1.0, fmt.max_exponent + 1.0)
    e = np.clip(_round(v, mode, rng), 0, fmt.max_exponent)
    sign = np.where(x < 0, -1, 1).astype(np.int8)
    e = np.where(zero, 0, e).astype(np.int64)
    if scales.ndim < x.ndim:
        scales = scales.reshape((1,) * (x.ndim - scales.ndim) + scales.shape)
    return LnsTensor(sign, e, zero, fmt, scales, Granularity(granularity))


def quantize_tensor(
    xs, cfg: QuantizerConfig, rng: Optional[np.random.Generator] = None
) -> LnsTensor:
    x = np.asarray(xs, dtype=np.float64)
    s = compute_scale(x, cfg.granularity)
    return quantize_array(x, cfg.format, s, cfg.rounding, rng, cfg.granularity)


def fake_quantize(
    xs, cfg: Optional[QuantizerConfig], rng: Optional[np.random.Generator] = None
) -> np.ndarray:
    """``decode(quantize_tensor(xs))``; identity when ``cfg`` is inactive."""
    x = np.asarray(xs, dtype=np.float64)
    if cfg is None or not cfg.active:
        return x
    return quantize_tensor(x, cfg, rng).decode()


def from_scalars(
    scalars: Sequence[LnsScalar], fmt: LnsFormat, scale: float = 1.0
) -> LnsTensor:
    """Pack a list of scalars sharing one scale into a 1-D tensor."""
    for v in scalars:
        if not v.is_zero and not 0 <= v.exponent <= fmt.max_exponent:
            raise DataError(f"exponent {v.exponent} outside format range")
    sign = np.array([v.sign for v in scalars], dtype=np.int8)
    e = np.array([0 if v.is_zero else v.exponent for v in scalars], dtype=np.int64)
    zero = np.array([v.is_zero for v in scalars], dtype=bool)
    return LnsTensor(sign, e, zero, fmt, np.array([float(scale)]))
