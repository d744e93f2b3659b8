"""Quantization error of LNS weight updates and closed-form bound checks.

Bound checks use the simplified quantizer ``sign(x) * 2 ** (SR(gamma * log2|x|) / gamma)``
(no scale, no clamp) and measure the squared distance in log2-magnitude space
between the quantized and the unquantized updated weights.
"""
from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import DataError
from .optim import Algorithm

THEOREM_ALGORITHMS = (Algorithm.GD, Algorithm.MUL, Algorithm.SIGN_MUL)


def measure_update_error(w_full, w_quant, return_excluded: bool = False):
    """``sum_k (log2|w_quant_k| - log2|w_full_k|) ** 2`` over nonzero pairs."""
    a = np.asarray(w_full, dtype=np.float64).ravel()
    b = np.asarray(w_quant, dtype=np.float64).ravel()
    keep = (a != 0) & (b != 0)
    if not keep.any():
        raise DataError("log-space error is undefined when every element is zero")
    r = float(np.sum((np.log2(np.abs(b[keep])) - np.log2(np.abs(a[keep]))) ** 2))
    if return_excluded:
        return r, int(keep.size - keep.sum())
    return r


def stochastic_round_error(x, trials: int, rng: np.random.Generator, batch: int = 1000):
    """Per-trial ``||SR(x) - x||**2`` for ``trials`` independent draws."""
    x = np.asarray(x, dtype=np.float64).ravel()
    lo = np.floor(x)
    q = x - lo
    out = np.empty(trials)
    for t0 in range(0, trials, batch):
        n = min(batch, trials - t0)
        up = rng.random((n, x.size)) < q
        r = up - q  # SR(x) - x
        out[t0:t0 + n] = np.sum(r * r, axis=1)
    return out


@dataclass
class SrCheck:
    mean_sq_err: float
    bound: float
    analytic: float
    stderr: float
    passed: bool


def check_sr_bound(x, trials: int, rng: np.random.Generator, sigmas: float = 3.0) -> SrCheck:
    """Empirical ``E||SR(x) - x||**2`` against ``sqrt(d) * ||x||``."""
    if trials < 1000:
        raise DataError("need at least 1000 trials for a meaningful estimate")
    x = np.asarray(x, dtype=np.float64).ravel()
    errs = stochastic_round_error(x, trials, rng)
    q = x - np.floor(x)
    mean = float(errs.mean())
    se = float(errs.std(ddof=1) / math.sqrt(trials))
    bound = float(math.sqrt(x.size) * np.linalg.norm(x))
    return SrCheck(mean, bound, float(np.sum(q * (1 - q))), se, mean - sigmas * se <= bound)


def _sr(v, rng):
    lo = np.floor(v)
    return lo + (rng.random(v.shape) < (v - lo))


def updated_log_magnitude(algorithm, w, g, eta) -> np.ndarray:
    """``log2|U(w, g)|`` computed in log space for the multiplicative rules."""
    algorithm = Algorithm(algorithm)
    w = np.asarray(w, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if algorithm is Algorithm.GD:
        with np.errstate(divide="ignore"):
            return np.log2(np.abs(w - eta * g))
    step = eta * (np.sign(g) if algorithm is Algorithm.SIGN_MUL else g) * np.sign(w)
    return np.log2(np.abs(w)) - step


def theorem_bound(algorithm, w, g, eta, gamma) -> float:
    """Right-hand side of the matching expected-error bound."""
    algorithm = Algorithm(algorithm)
    d = np.size(w)
    if algorithm is Algorithm.GD:
        with np.errstate(divide="ignore"):
            lg = np.log2(np.abs(np.asarray(w) - eta * np.asarray(g)))
        lg = lg[np.isfinite(lg)]
        return float(math.sqrt(d) / gamma * np.linalg.norm(lg))
    if algorithm is Algorithm.MUL:
        return float(math.sqrt(d) * eta / gamma * np.linalg.norm(g))
    if algorithm is Algorithm.SIGN_MUL:
        return float(d * eta / gamma)
    raise DataError(f"no closed-form bound for {algorithm.value}")


@dataclass
class ErrorRecord:
    algorithm: str
    eta: float
    gamma: int
    d: int
    trials: int
    mean_r: float
    bound: float
    stderr: float = 0.0
    zeroed_fraction: float = 0.0
    excluded: int = 0
    step: int = 0

    @property
    def passed(self) -> bool:
        return self.mean_r - 3.0 * self.stderr <= self.bound

    def row(self) -> dict:
        out = asdict(self)
        out["pass"] = self.passed
        return out


def check_theorem_bound(algorithm, w, g, eta: float, gamma: int, trials: int,
                        rng: np.random.Generator, step: int = 0) -> ErrorRecord:
    """Monte-Carlo ``E r_t`` for one quantized update with stochastic rounding.

    ``w`` should already lie on the ``gamma`` grid (it is a stored LNS weight).
    Elements whose updated value is exactly zero are excluded and counted.
    """
    algorithm = Algorithm(algorithm)
    w = np.asarray(w, dtype=np.float64).ravel()
    g = np.asarray(g, dtype=np.float64).ravel()
    lu = updated_log_magnitude(algorithm, w, g, eta)
    keep = np.isfinite(lu) & (w != 0)
    lu = lu[keep]
    v = gamma * lu
    lw = gamma * np.log2(np.abs(w[keep]))
    rs = np.empty(trials)
    zeroed = np.empty(trials)
    for t in range(trials):
        k = _sr(v, rng)
        rs[t] = np.sum((k - v) ** 2) / gamma**2
        zeroed[t] = np.mean(k == np.rint(lw))
    return ErrorRecord(
        algorithm.value, float(eta), int(gamma), int(w.size), int(trials),
        float(rs.mean()), theorem_bound(algorithm, w, g, eta, gamma),
        float(rs.std(ddof=1) / math.sqrt(trials)) if trials > 1 else 0.0,
        float(zeroed.mean()), int(w.size - keep.sum()), step,
    )


def log_uniform_weights(d: int, rng: np.random.Generator, gamma: int,
                        lo_exp: float = -8.0, hi_exp: float = 0.0) -> np.ndarray:
    """Random-sign weights with ``log2|w|`` uniform on ``[lo_exp, hi_exp]``, snapped to the grid."""
    k = np.rint(rng.uniform(lo_exp, hi_exp, size=d) * gamma) / gamma
    return np.where(rng.random(d) < 0.5, -1.0, 1.0) * np.exp2(k)


@dataclass
class SweepSpec:
    eta_grid: Sequence[float] = tuple(2.0**-k for k in range(3, 10))
    gamma_grid: Sequence[int] = (2**10,)
    algorithms: Sequence[str] = tuple(a.value for a in THEOREM_ALGORITHMS)
    trials: int = 256
    d: int = 1024
    grad_scale: float = 1e-4
    weight_range: tuple = (-8.0, 0.0)
    workload: str = "random-weights"
    samples: Optional[list] = field(default=None, repr=False)  # (w, g) pairs for "toy-training"
    seed: int = 0

    def __post_init__(self):
        if not self.eta_grid or not self.gamma_grid or not self.algorithms:
            raise DataError("sweep grids must be non-empty")
        if self.trials < 1:
            raise DataError("trials must be >= 1")


ETA_SWEEP = SweepSpec()
GAMMA_SWEEP = SweepSpec(eta_grid=(2.0**-6,), gamma_grid=tuple(2**k for k in range(6, 13)))


def _point(spec: SweepSpec, i_eta: int, i_gamma: int, algo: str) -> ErrorRecord:
    eta, gamma = spec.eta_grid[i_eta], spec.gamma_grid[i_gamma]
    # one independent stream per grid point; weights/gradients shared across algorithms
    data_rng = np.random.default_rng([spec.seed, i_gamma])
    algo_idx = [a.value for a in Algorithm].index(Algorithm(algo).value)
    if spec.workload == "toy-training":
        recs = []
        for j, (w, g) in enumerate(spec.samples or []):
            wq = np.sign(w) * np.exp2(np.rint(np.log2(np.abs(np.where(w == 0, 1.0, w))) * gamma) / gamma)
            wq = np.where(w == 0, 0.0, wq)
            rng = np.random.default_rng([spec.seed, i_eta, i_gamma, algo_idx, j])
            recs.append(check_theorem_bound(algo, wq, g, eta, gamma, spec.trials, rng, step=j))
        if not recs:
            raise DataError("toy-training workload needs (w, g) samples")
        return ErrorRecord(
            algo, float(eta), int(gamma), recs[0].d, spec.trials,
            float(np.mean([r.mean_r for r in recs])), float(np.mean([r.bound for r in recs])),
            float(np.sqrt(np.sum([r.stderr**2 for r in recs])) / len(recs)),
            float(np.mean([r.zeroed_fraction for r in recs])), sum(r.excluded for r in recs),
        )
    w = log_uniform_weights(spec.d, data_rng, gamma, *spec.weight_range)
    g = data_rng.normal(0.0, spec.grad_scale, size=spec.d)
    rng = np.random.default_rng([spec.seed, i_eta, i_gamma, algo_idx])
    return check_theorem_bound(algo, w, g, eta, gamma, spec.trials, rng)


def run_sweep(spec: SweepSpec, threads: int = 1) -> list[ErrorRecord]:
    """Averaged error records for every (algorithm, eta, gamma) grid point.

    Row order is fixed (algorithm, gamma, eta) whatever the thread count.
    """
    jobs = [(ie, ig, a) for a in spec.algorithms
            for ig in range(len(spec.gamma_grid)) for ie in range(len(spec.eta_grid))]
    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            return list(ex.map(lambda j: _point(spec, *j), jobs))
    return [_point(spec, *j) for j in jobs]


def scaling_slope(records: Sequence[ErrorRecord], along: str) -> float:
    """Least-squares slope of ``log(mean_r)`` against ``log(eta)`` or ``log(1/gamma)``."""
    xs = [math.log(r.eta) if along == "eta" else -math.log(r.gamma) for r in records]
    ys = [math.log(r.mean_r) for r in records]
    return float(np.polyfit(xs, ys, 1)[0])


CSV_COLUMNS = ("algorithm", "eta", "gamma", "d", "trials", "mean_r", "bound", "pass")


def records_to_csv(records: Sequence[ErrorRecord]) -> str:
    buf = io.StringIO()
    wr = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, extrasaction="ignore", lineterminator="\n")
    wr.writeheader()
    for r in records:
        wr.writerow(r.row())
    return buf.getvalue()


def records_summary(records: Sequence[ErrorRecord]) -> dict:
    return {
        "schema": "lnskit.error-sweep/1",
        "points": len(records),
        "all_pass": all(r.passed for r in records),
        "records": [r.row() for r in records],
    }


def summary_json(records: Sequence[ErrorRecord]) -> str:
    return json.dumps(records_summary(records), indent=1)
