"""Golden-vector files for datapath conformance runs.

One vector per line::

    exponents_a | signs_a | exponents_b | signs_b | expected_partial_sum_hex

Exponents are comma-separated integers, or ``z`` for a zero lane.  Signs are
comma-separated ``+``/``-``.  The expected value is a signed hex integer in
units of ``2**-F`` (``0xC00000``, ``-0x1A``).  Blank lines are ignored, and
comment lines starting with ``#`` may carry ``key=value`` settings that apply
to the vectors after them::

    # gamma=8 bitwidth=8 F=23 acc=32 vs=32 conversion=exact
"""
from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field

import numpy as np

from .datapath import MacConfig, format_hex, mac_lanes
from .errors import DataError
from .format import LnsFormat

log = logging.getLogger(__name__)

_SETTING = re.compile(r"(\w+)=([\w:]+)")


@dataclass
class GoldenVector:
    line: int
    exps_a: list
    signs_a: list
    exps_b: list
    signs_b: list
    expected: int
    settings: dict = field(default_factory=dict)


def _parse_exps(tok: str, lineno: int):
    out = []
    for t in tok.split(","):
        t = t.strip()
        if t == "z":
            out.append(None)
        else:
            try:
                out.append(int(t))
            except ValueError:
                raise DataError(f"line {lineno}: bad exponent {t!r}") from None
    return out


def _parse_signs(tok: str, lineno: int):
    out = []
    for t in tok.split(","):
        t = t.strip()
        if t not in "+-" or not t:
            raise DataError(f"line {lineno}: bad sign {t!r}")
        out.append(-1 if t == "-" else 1)
    return out


def parse_golden(text: str) -> list[GoldenVector]:
    settings = {}
    vectors = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            settings.update(_SETTING.findall(line))
            continue
        parts = [p.strip() for p in line.split("|")]
        if len(parts) != 5:
            raise DataError(f"line {lineno}: expected 5 '|'-separated fields, got {len(parts)}")
        ea, sa = _parse_exps(parts[0], lineno), _parse_signs(parts[1], lineno)
        eb, sb = _parse_exps(parts[2], lineno), _parse_signs(parts[3], lineno)
        if not len(ea) == len(sa) == len(eb) == len(sb):
            raise DataError(f"line {lineno}: lane counts differ")
        try:
            expected = int(parts[4], 16)
        except ValueError:
            raise DataError(f"line {lineno}: bad hex value {parts[4]!r}") from None
        vectors.append(GoldenVector(lineno, ea, sa, eb, sb, expected, dict(settings)))
    return vectors


def mac_config_from_settings(settings: dict) -> tuple[MacConfig, str]:
    bw = int(settings.get("bitwidth", 8))
    fmt = LnsFormat(bw, int(settings.get("gamma", 8)))
    cfg = MacConfig(
        format=fmt,
        vector_size=int(settings.get("vs", 32)),
        input_bitwidth=bw,
        accumulator_bits=int(settings.get("acc", 24)),
        fractional_bits=int(settings.get("F", 23)),
    )
    return cfg, settings.get("conversion", "exact")


def _lanes(exps, signs):
    z = np.array([e is None for e in exps])
    e = np.array([0 if x is None else x for x in exps], dtype=np.int64)
    return e, np.array(signs, dtype=np.int64), z


def simulate(v: GoldenVector):
    """Return ``(partial_sum, saturated, per_lane_contributions)`` for one vector."""
    cfg, conv = mac_config_from_settings(v.settings)
    ea, sa, za = _lanes(v.exps_a, v.signs_a)
    eb, sb, zb = _lanes(v.exps_b, v.signs_b)
    for e, z in ((ea, za), (eb, zb)):
        if np.any(e[~z] > cfg.format.max_exponent) or np.any(e < 0):
            raise DataError(f"line {v.line}: exponent outside the {cfg.format.bitwidth}-bit range")
    acc, sat = mac_lanes(ea, sa, za, eb, sb, zb, cfg, conv)
    lanes = [
        int(mac_lanes(ea[i:i + 1], sa[i:i + 1], za[i:i + 1], eb[i:i + 1], sb[i:i + 1], zb[i:i + 1], cfg, conv)[0])
        for i in range(len(ea))
    ]
    return int(acc), bool(sat), lanes


@dataclass
class ConformanceReport:
    total: int = 0
    failures: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "passed": self.passed,
            "failures": self.failures,
            "warnings": self.warnings,
        }


def run_conformance(text: str) -> ConformanceReport:
    vectors = parse_golden(text)
    report = ConformanceReport(total=len(vectors))
    if not vectors:
        msg = "golden file holds no vectors; passing vacuously"
        log.warning(msg)
        report.warnings.append(msg)
    for v in vectors:
        got, sat, lanes = simulate(v)
        if got != v.expected:
            report.failures.append({
                "line": v.line,
                "expected": format_hex(v.expected),
                "got": format_hex(got),
                "diff": got - v.expected,
                "saturated": sat,
                "lane_contributions": [format_hex(x) for x in lanes],
            })
    return report


def format_vector(exps_a, signs_a, exps_b, signs_b, value: int) -> str:
    def e(xs):
        return ",".join("z" if x is None else str(int(x)) for x in xs)

    def s(xs):
        return ",".join("-" if x < 0 else "+" for x in xs)

    return f"{e(exps_a)} | {s(signs_a)} | {e(exps_b)} | {s(signs_b)} | {format_hex(value)}"
