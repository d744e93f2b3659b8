"""Additive and multiplicative weight updates, and LNS weight storage.

Multiplicative updates work on ``log2|W|``: the magnitude moves by
``-eta * sign(W) * g`` in log2 space and the sign never changes.  Zero weights
have ``sign(0) = 0`` and stay zero.

Madam is ``W * exp(-eta * sign(W) * g_star)``; in log2 space that is a step of
``eta * log2(e) * sign(W) * g_star``, so ``eta`` keeps its natural-log meaning.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError
from .format import (
    Granularity, LnsFormat, LnsTensor, QuantizerConfig, Role, RoundingMode,
    _round, compute_scale, quantize_array,
)

EPS = 1e-12
LOG2E = math.log2(math.e)


class Algorithm(str, enum.Enum):
    GD = "GD"
    MUL = "MUL"
    SIGN_MUL = "SIGN_MUL"
    MADAM = "MADAM"

    @property
    def multiplicative(self) -> bool:
        return self is not Algorithm.GD


def update_gd(w, g, eta):
    return np.asarray(w, dtype=np.float64) - eta * np.asarray(g, dtype=np.float64)


def _log_step(w, step):
    """``sign(w) * 2 ** (log2|w| - step)``; zeros stay zero, zero steps are exact no-ops."""
    w = np.asarray(w, dtype=np.float64)
    step = np.asarray(step, dtype=np.float64)
    with np.errstate(divide="ignore"):
        out = np.sign(w) * np.exp2(np.log2(np.abs(w)) - step)
    return np.where((w == 0) | (step == 0), w, out)


def update_mul(w, g, eta):
    w = np.asarray(w, dtype=np.float64)
    return _log_step(w, eta * np.asarray(g, dtype=np.float64) * np.sign(w))


def update_sign_mul(w, g, eta):
    w = np.asarray(w, dtype=np.float64)
    return _log_step(w, eta * np.sign(g) * np.sign(w))


@dataclass
class OptimizerState:
    """Per-parameter optimizer state.

    ``beta1`` is carried for configuration round-trips only; the normalized
    gradient uses the bias-corrected second moment alone.
    """

    algorithm: Algorithm = Algorithm.MADAM
    eta: float = 2.0**-7
    beta2: float = 0.999
    beta1: float = 0.9
    second_moment: Optional[np.ndarray] = None
    step_count: int = 0

    def __post_init__(self):
        self.algorithm = Algorithm(self.algorithm)
        if self.eta < 0:
            raise ConfigError("eta must be non-negative")
        if not 0.0 < self.beta2 < 1.0:
            raise ConfigError("beta2 must lie in (0, 1)")

    def normalized_gradient(self, g) -> np.ndarray:
        """Advance the second-moment estimate and return ``g / sqrt(g2_hat)``."""
        g = np.asarray(g, dtype=np.float64)
        if self.second_moment is None:
            self.second_moment = np.zeros_like(g)
        self.step_count += 1
        self.second_moment = self.beta2 * self.second_moment + (1.0 - self.beta2) * g * g
        g2_hat = self.second_moment / (1.0 - self.beta2**self.step_count)
        return g / (np.sqrt(g2_hat) + EPS)

    def exponent_step(self, w, g) -> np.ndarray:
        """log2-magnitude decrement for the multiplicative algorithms."""
        sw = np.sign(w)
        if self.algorithm is Algorithm.MUL:
            return self.eta * np.asarray(g, dtype=np.float64) * sw
        if self.algorithm is Algorithm.SIGN_MUL:
            return self.eta * np.sign(g) * sw
        if self.algorithm is Algorithm.MADAM:
            return self.eta * LOG2E * self.normalized_gradient(g) * sw
        raise ConfigError("GD has no exponent step")


def update_madam(state: OptimizerState, w, g, eta: Optional[float] = None):
    if eta is not None:
        state.eta = eta
    w = np.asarray(w, dtype=np.float64)
    return _log_step(w, state.eta * LOG2E * state.normalized_gradient(g) * np.sign(w))


def apply_update(state: OptimizerState, w, g):
    """One full-precision step of the state's algorithm."""
    if state.algorithm is Algorithm.GD:
        return update_gd(w, g, state.eta)
    if state.algorithm is Algorithm.MUL:
        return update_mul(w, g, state.eta)
    if state.algorithm is Algorithm.SIGN_MUL:
        return update_sign_mul(w, g, state.eta)
    return update_madam(state, w, g)


class StoreMode(str, enum.Enum):
    SHADOW = "shadow"
    DIRECT = "direct"


def _shift_down(e: np.ndarray, by: int) -> np.ndarray:
    return e >> by if by else e.copy()


@dataclass
class WeightStore:
    """Weights held in LNS at weight-update (QU) precision.

    ``lns`` holds QU-precision exponents in both modes; the forward view drops
    the extra low bits with a right shift.  Shadow mode also keeps a
    full-precision copy that the update runs on.  Group scales are fixed when
    the store is created; updates that would exceed a scale clamp to it.
    """

    mode: StoreMode
    lns: LnsTensor
    qu: QuantizerConfig
    forward_format: LnsFormat
    shadow: Optional[np.ndarray] = None
    rng: Optional[np.random.Generator] = field(default=None, repr=False)

    @classmethod
    def create(cls, w, qu: QuantizerConfig, forward_format: LnsFormat, mode="direct",
               granularity=Granularity.PER_CHANNEL, rng=None, headroom: float = 0.0) -> "WeightStore":
        """Quantize ``w`` into a new store.

        ``headroom`` raises every group scale by ``2**headroom`` so weights can
        grow past their initial maximum before clamping.
        """
        mode = StoreMode(mode)
        if qu.format.bitwidth < forward_format.bitwidth:
            raise ConfigError(
                f"QU bitwidth {qu.format.bitwidth} is below the forward weight bitwidth "
                f"{forward_format.bitwidth}"
            )
        shift = qu.format.b - forward_format.b
        if shift != qu.format.bitwidth - forward_format.bitwidth:
            raise ConfigError(
                "QU gamma must be the forward gamma times 2**(extra bits) so the dynamic ranges align"
            )
        w = np.asarray(w, dtype=np.float64)
        scales = compute_scale(w, granularity) * 2.0**headroom
        rng = rng if rng is not None else qu.rounding.generator()
        lns = quantize_array(w, qu.format, scales, qu.rounding, rng, granularity)
        shadow = w.copy() if mode is StoreMode.SHADOW else None
        return cls(mode, lns, qu, forward_format, shadow, rng)

    @property
    def shift(self) -> int:
        return self.qu.format.b - self.forward_format.b

    def forward_view(self) -> LnsTensor:
        t = self.lns
        return LnsTensor(t.sign.copy(), _shift_down(t.exponent, self.shift), t.zero.copy(),
                         self.forward_format, t.scales.copy(), t.granularity)

    def decode(self) -> np.ndarray:
        return self.lns.decode()

    def _requantize(self, w):
        self.lns = quantize_array(w, self.qu.format, self.lns.scales, self.qu.rounding,
                                  self.rng, self.lns.granularity)

    def step(self, state: OptimizerState, g) -> int:
        """Apply one quantized update; returns the number of exponents that changed."""
        before = self.lns.exponent.copy()
        g = np.asarray(g, dtype=np.float64)
        if self.mode is StoreMode.SHADOW:
            self.shadow = apply_update(state, self.shadow, g)
            self._requantize(self.shadow)
        elif state.algorithm in (Algorithm.MADAM, Algorithm.SIGN_MUL):
            # integer exponent arithmetic only: e <- e + gamma_U * step
            t = self.lns
            w_sign = np.where(t.zero, 0, t.sign)
            step = state.exponent_step(w_sign, g)
            v = t.exponent + self.qu.format.gamma * step
            e = np.clip(_round(v, self.qu.rounding, self.rng), 0, self.qu.format.max_exponent)
            t.exponent = np.where(t.zero, t.exponent, e).astype(np.int64)
        else:
            self._requantize(apply_update(state, self.decode(), g))
        return int(np.count_nonzero(self.lns.exponent != before))


def qu_config(forward_format: LnsFormat, bitwidth: int, rounding: RoundingMode = RoundingMode()) -> QuantizerConfig:
    """QU quantizer whose gamma grows with the extra bits to keep the dynamic range."""
    return QuantizerConfig(Role.QU, forward_format.widened(bitwidth), rounding)
