"""Experiment runners behind the command-line subcommands.

Each ``cmd_*`` takes an :class:`ExperimentConfig` and returns a
:class:`RunReport`.  Runs are deterministic given the config and seed: every
independent replica or grid point draws from its own seeded generator, and
results are assembled in grid order whatever the thread count.
"""
from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import error_analysis as ea
from .config import ExperimentConfig
from .datapath import MacConfig, OperationTally, Routing, affine_tally
from .datasets import Dataset, make_dataset
from .errors import ConfigError, DataError
from .format import Granularity, LnsFormat, QuantizerConfig, Role, RoundingMode
from .golden import run_conformance
from .nn import Network, QuantConfigs, backward, forward, loss_softmax_xent
from .optim import Algorithm, OptimizerState, WeightStore, apply_update, qu_config

log = logging.getLogger(__name__)

SCHEMA = "lnskit.run-report/1"


@dataclass
class RunReport:
    task: str
    seed: int
    config: dict
    history: list = field(default_factory=list)
    final: dict = field(default_factory=dict)
    counters: dict = field(default_factory=dict)
    tallies: dict = field(default_factory=dict)
    results: dict = field(default_factory=dict)
    checks: dict = field(default_factory=dict)
    tables: dict = field(default_factory=dict)  # name -> CSV text
    wall_clock_s: float = 0.0
    schema: str = SCHEMA

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    def payload(self) -> dict:
        """Everything except wall-clock time; identical across reruns."""
        return {
            "schema": self.schema,
            "task": self.task,
            "seed": self.seed,
            "passed": self.passed,
            "checks": dict(self.checks),
            "final": self.final,
            "counters": self.counters,
            "tallies": self.tallies,
            "results": self.results,
            "history": self.history,
            "config": self.config,
        }

    def to_dict(self) -> dict:
        out = self.payload()
        out["wall_clock_s"] = self.wall_clock_s
        return out


# ---------------------------------------------------------------------------
# building blocks


def dataset_for(cfg: ExperimentConfig) -> Dataset:
    d = cfg.dataset
    try:
        return make_dataset(d.name, d.n, cfg.seed, test_fraction=d.test_fraction, **d.params)
    except TypeError as exc:
        raise ConfigError(f"dataset.params: {exc}") from None


def quant_configs(cfg: ExperimentConfig, gamma: Optional[int] = None) -> QuantConfigs:
    q = cfg.quant
    mac = MacConfig(LnsFormat(q.bitwidth, gamma or q.gamma), cfg.mac.vector_size, q.bitwidth,
                    cfg.mac.accumulator_bits, cfg.mac.fractional_bits)
    if not q.enabled:
        return QuantConfigs(mac=mac)
    fmt = LnsFormat(q.bitwidth, gamma or q.gamma)
    rounding = RoundingMode(q.rounding, cfg.seed)
    grans = {"QW": q.weight_granularity, "QA": q.activation_granularity,
             "QE": q.error_granularity, "QG": q.gradient_granularity}

    def make(role):
        if role not in q.roles:
            return QuantizerConfig()
        conv = q.conversion if role in ("QW", "QA") else "real"
        return QuantizerConfig(Role(role), fmt, rounding, Granularity(grans[role]), conv)

    return QuantConfigs(make("QW"), make("QA"), make("QE"), make("QG"), mac)


@dataclass
class TrainResult:
    history: list
    final_accuracy: float
    final_loss: float
    saturated: int = 0
    zero_updates: int = 0
    updates: int = 0


def accuracy(net: Network, x, y, cfgs: QuantConfigs, rng=None, weights_q=None) -> tuple[float, float]:
    r = forward(net, x, cfgs, rng, weights_q)
    loss, _ = loss_softmax_xent(r.logits, y)
    return float(np.mean(r.logits.argmax(axis=1) == y)), loss


def train_run(cfg: ExperimentConfig, data: Dataset, seed: int, *, arm: str = "lns",
              algorithm: Optional[str] = None, eta: Optional[float] = None,
              qu_bitwidth: Optional[int] = None, gamma: Optional[int] = None,
              steps: Optional[int] = None) -> TrainResult:
    """Train one toy network.

    ``arm="fp"`` is the full-precision baseline (no quantizers, float weights);
    ``arm="lns"`` quantizes the configured roles and keeps the weights in a
    :class:`WeightStore`.  Keyword overrides replace the config values.
    """
    o, t = cfg.optimizer, cfg.training
    steps = t.steps if steps is None else steps
    rng = np.random.default_rng(seed)
    sizes = [data.n_features, *cfg.network.hidden, data.n_classes]
    net = Network.init(sizes, rng, cfg.network.activation)
    if arm == "fp":
        cfgs = QuantConfigs(mac=quant_configs(cfg).mac)
        algo = Algorithm(algorithm or t.baseline_algorithm)
        eta = t.baseline_eta if eta is None else eta
        stores = None
    else:
        cfgs = quant_configs(cfg, gamma)
        algo = Algorithm(algorithm or o.algorithm)
        eta = o.eta if eta is None else eta
        stores = None
        if cfgs.weight.active:
            qu = qu_config(cfgs.weight.format, qu_bitwidth or o.qu_bitwidth,
                           RoundingMode(o.qu_rounding, seed))
            store_rng = np.random.default_rng([seed, 1])
            stores = [WeightStore.create(w, qu, cfgs.weight.format, o.store_mode,
                                         Granularity(cfg.quant.weight_granularity), store_rng, o.headroom)
                      for w in net.weights]
    states = [OptimizerState(algo, eta, o.beta2, o.beta1) for _ in net.weights]
    warm = [OptimizerState(Algorithm.GD, o.warmup_lr) for _ in net.weights]

    def views():
        if stores is None:
            return None
        net.weights = [s.decode() for s in stores]
        return [s.forward_view() for s in stores]

    eval_rng = np.random.default_rng([seed, 2])
    history = []
    acc0, loss0 = accuracy(net, data.x_test, data.y_test, cfgs, eval_rng, views())
    history.append({"step": 0, "loss": loss0, "accuracy": acc0})
    n = len(data.y_train)
    saturated = zero_updates = updates = 0
    window = []
    for step in range(1, steps + 1):
        idx = rng.integers(0, n, size=t.batch_size)
        res = forward(net, data.x_train[idx], cfgs, rng, views())
        saturated += res.saturated
        loss, g = loss_softmax_xent(res.logits, data.y_train[idx])
        window.append(loss)
        grads = backward(net, g, res.caches, cfgs, rng).grad_w
        st = warm if (arm != "fp" and step <= o.warmup_steps) else states
        for l, gw in enumerate(grads):
            nz = int(np.count_nonzero(gw))
            updates += nz
            if stores is not None:
                changed = stores[l].step(st[l], gw)
                zero_updates += max(nz - changed, 0)
            else:
                net.weights[l] = apply_update(st[l], net.weights[l], gw)
        if step % t.eval_every == 0 or step == steps:
            acc, _ = accuracy(net, data.x_test, data.y_test, cfgs, eval_rng, views())
            history.append({"step": step, "loss": float(np.mean(window)), "accuracy": acc})
            window = []
    last = history[-1]
    return TrainResult(history, last["accuracy"], last["loss"], saturated, zero_updates, updates)


def _map(fn, jobs, threads: int):
    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            return list(ex.map(fn, jobs))
    return [fn(j) for j in jobs]


def _report(cfg: ExperimentConfig) -> RunReport:
    return RunReport(cfg.task, cfg.seed, cfg.to_dict())


# ---------------------------------------------------------------------------
# commands


def cmd_train(cfg: ExperimentConfig, threads: int = 1) -> RunReport:
    t0 = time.perf_counter()
    rep = _report(cfg)
    data = dataset_for(cfg)
    arms = ["lns"] + (["fp"] if cfg.training.baseline else [])
    runs = dict(zip(arms, _map(lambda a: train_run(cfg, data, cfg.seed, arm=a), arms, threads)))
    main = runs["lns"]
    rep.history = main.history
    rep.final = {"accuracy": main.final_accuracy, "loss": main.final_loss}
    rep.counters = {"saturated": main.saturated, "zero_updates": main.zero_updates,
                    "updates": main.updates}
    if "fp" in runs:
        fp = runs["fp"]
        rep.results["baseline"] = {"accuracy": fp.final_accuracy, "loss": fp.final_loss,
                                   "history": fp.history}
        rep.results["accuracy_gap"] = fp.final_accuracy - main.final_accuracy
    rep.checks["finite_loss"] = bool(all(math.isfinite(h["loss"]) for h in main.history))
    rep.wall_clock_s = time.perf_counter() - t0
    return rep


def select_gamma(accuracies: dict) -> int:
    """Highest accuracy; ties go to the smallest gamma."""
    if not accuracies:
        raise ConfigError("sweep.gamma_grid: empty grid")
    best = max(accuracies.values())
    return min(g for g, a in accuracies.items() if a == best)


def cmd_base_factor_sweep(cfg: ExperimentConfig, threads: int = 1) -> RunReport:
    t0 = time.perf_counter()
    rep = _report(cfg)
    grid = [int(g) for g in cfg.sweep.gamma_grid]
    if not grid:
        raise ConfigError("sweep.gamma_grid: empty grid")
    data = dataset_for(cfg)
    runs = _map(lambda g: train_run(cfg, data, cfg.seed, gamma=g, steps=cfg.sweep.gamma_steps),
                grid, threads)
    accs = {g: r.final_accuracy for g, r in zip(grid, runs)}
    best = select_gamma(accs)
    rep.results = {"accuracy": {str(g): a for g, a in accs.items()}, "selected_gamma": best}
    rep.final = {"accuracy": accs[best], "gamma": best}
    rep.tables["base_factor"] = "gamma,accuracy\n" + "".join(f"{g},{a}\n" for g, a in accs.items())
    rep.checks["grid_nonempty"] = True
    rep.wall_clock_s = time.perf_counter() - t0
    return rep


def cmd_qu_bitwidth_sweep(cfg: ExperimentConfig, threads: int = 1) -> RunReport:
    """Accuracy per (optimizer, QU bitwidth), median over replicas.

    Degradation is measured against the widest QU in the grid.  When both
    MADAM and GD are swept, the report checks that Madam degrades no more than
    GD at the narrowest QU.
    """
    t0 = time.perf_counter()
    rep = _report(cfg)
    s = cfg.sweep
    bws = sorted({int(b) for b in s.qu_bitwidths}, reverse=True)
    if not bws or not s.qu_algorithms:
        raise ConfigError("sweep: qu_bitwidths and qu_algorithms must be non-empty")
    if min(bws) < cfg.quant.bitwidth:
        raise ConfigError(f"sweep.qu_bitwidths: {min(bws)} is below the forward bitwidth")
    data = dataset_for(cfg)
    jobs = [(a, b, r) for a in s.qu_algorithms for b in bws for r in range(s.replicas)]
    runs = _map(lambda j: train_run(cfg, data, cfg.seed + j[2], algorithm=j[0], eta=s.qu_etas[j[0]],
                                    qu_bitwidth=j[1], steps=s.qu_steps), jobs, threads)
    acc = {}
    for (a, b, r), res in zip(jobs, runs):
        acc.setdefault(a, {}).setdefault(b, []).append(res.final_accuracy)
    matrix = {a: {str(b): float(np.median(v)) for b, v in row.items()} for a, row in acc.items()}
    drop = {}
    for a, row in acc.items():
        per_replica = np.array(row[bws[0]]) - np.array(row[bws[-1]])
        drop[a] = float(np.median(per_replica))
    rep.results = {"accuracy": matrix, "replicas": {a: {str(b): v for b, v in row.items()} for a, row in acc.items()},
                   "degradation": drop, "widest": bws[0], "narrowest": bws[-1]}
    rep.tables["qu_bitwidth"] = "algorithm,qu_bitwidth,median_accuracy\n" + "".join(
        f"{a},{b},{v}\n" for a, row in matrix.items() for b, v in row.items())
    if "MADAM" in drop and "GD" in drop and len(bws) > 1:
        rep.checks["madam_degrades_no_more_than_gd"] = drop["MADAM"] <= drop["GD"]
    else:
        rep.checks["swept"] = True
    rep.wall_clock_s = time.perf_counter() - t0
    return rep


def cmd_theorem_check(cfg: ExperimentConfig, threads: int = 1) -> RunReport:
    """Stochastic-rounding bound, per-algorithm error bounds and the scaling laws."""
    t0 = time.perf_counter()
    rep = _report(cfg)
    th = cfg.theorem
    rng = np.random.default_rng(cfg.seed)
    sr = []
    for i in range(th.sr_vectors):
        x = rng.uniform(-4.0, 4.0, size=th.sr_dim)
        c = ea.check_sr_bound(x, th.sr_trials, np.random.default_rng([cfg.seed, 7, i]))
        sr.append(c)
    rel = [abs(c.mean_sq_err - c.analytic) / c.analytic for c in sr]
    rep.checks["sr_bound"] = all(c.passed for c in sr)
    rep.checks["sr_matches_analytic"] = max(rel) <= 0.05
    rep.results["sr"] = {"vectors": len(sr), "max_rel_dev_from_analytic": max(rel),
                         "max_ratio_to_bound": max(c.mean_sq_err / c.bound for c in sr)}

    common = dict(algorithms=tuple(th.algorithms), trials=th.trials, d=th.d,
                  grad_scale=th.grad_scale, seed=cfg.seed)
    eta_spec = ea.SweepSpec(eta_grid=tuple(th.eta_grid), gamma_grid=(th.eta_sweep_gamma,), **common)
    gamma_spec = ea.SweepSpec(eta_grid=(th.gamma_sweep_eta,), gamma_grid=tuple(th.gamma_grid), **common)
    by_eta = ea.run_sweep(eta_spec, threads)
    by_gamma = ea.run_sweep(gamma_spec, threads)
    records = by_eta + by_gamma
    rep.checks["bounds"] = all(r.passed for r in records)
    rep.tables["eta_sweep"] = ea.records_to_csv(by_eta)
    rep.tables["gamma_sweep"] = ea.records_to_csv(by_gamma)
    rep.results["eta_sweep"] = ea.records_summary(by_eta)
    rep.results["gamma_sweep"] = ea.records_summary(by_gamma)
    algos = set(th.algorithms)
    if "MUL" in algos:
        se = ea.scaling_slope([r for r in by_eta if r.algorithm == "MUL"], "eta") if len(th.eta_grid) > 1 else 1.0
        sg = ea.scaling_slope([r for r in by_gamma if r.algorithm == "MUL"], "gamma") if len(th.gamma_grid) > 1 else 1.0
        rep.results["mul_slope_eta"], rep.results["mul_slope_inv_gamma"] = se, sg
        rep.checks["mul_linear_in_eta"] = abs(se - 1.0) <= 0.15
        rep.checks["mul_linear_in_inv_gamma"] = abs(sg - 1.0) <= 0.15
    if {"GD", "MUL"} <= algos:
        def pairs(rs):
            gd = {(r.eta, r.gamma): r.mean_r for r in rs if r.algorithm == "GD"}
            return [(gd[(r.eta, r.gamma)], r.mean_r) for r in rs if r.algorithm == "MUL"]
        rep.checks["gd_exceeds_mul"] = all(g > m for g, m in pairs(records))
    rep.wall_clock_s = time.perf_counter() - t0
    return rep


def cmd_datapath_conformance(cfg: ExperimentConfig, threads: int = 1) -> RunReport:
    t0 = time.perf_counter()
    rep = _report(cfg)
    if not cfg.golden_file:
        raise ConfigError("golden_file: a golden-vector file is required for datapath-conformance")
    path = Path(cfg.golden_file)
    if not path.exists():
        raise DataError(f"golden_file: {path} does not exist")
    conf = run_conformance(path.read_text())
    rep.results = conf.to_dict()
    rep.checks["conformance"] = conf.passed
    rep.wall_clock_s = time.perf_counter() - t0
    return rep


def network_tally(sizes, batch: int, mac: MacConfig, conversion: str) -> OperationTally:
    """Forward plus both backward passes over every affine layer."""
    total = OperationTally()
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        total = total + affine_tally(batch, fan_in, fan_out, mac, conversion, tuple(Routing))
    return total


def cmd_tally_report(cfg: ExperimentConfig, threads: int = 1) -> RunReport:
    t0 = time.perf_counter()
    rep = _report(cfg)
    mac = quant_configs(cfg).mac
    data = dataset_for(cfg)
    sizes = [data.n_features, *cfg.network.hidden, data.n_classes]
    modes = ["exact"] + [f"hybrid:{b}" for b in cfg.tally.hybrid_splits]
    tallies = {m: network_tally(sizes, cfg.tally.batch, mac, m) for m in modes}
    rep.tallies = {m: t.to_dict() for m, t in tallies.items()}
    luts = [tallies[f"hybrid:{b}"]["lut_mults"] for b in sorted(cfg.tally.hybrid_splits)]
    rep.checks["smaller_lut_fewer_mults"] = all(a < b for a, b in zip(luts, luts[1:]))
    rep.results = {"sizes": sizes, "batch": cfg.tally.batch}
    rep.tables["tally"] = "mode," + ",".join(OperationTally().counts) + "\n" + "".join(
        f"{m}," + ",".join(str(v) for v in t.counts.values()) + "\n" for m, t in tallies.items())
    rep.wall_clock_s = time.perf_counter() - t0
    return rep


COMMANDS = {
    "train": cmd_train,
    "base-factor-sweep": cmd_base_factor_sweep,
    "qu-bitwidth-sweep": cmd_qu_bitwidth_sweep,
    "theorem-check": cmd_theorem_check,
    "datapath-conformance": cmd_datapath_conformance,
    "tally-report": cmd_tally_report,
}


def run(cfg: ExperimentConfig, threads: int = 1) -> RunReport:
    return COMMANDS[cfg.task](cfg, threads)


def with_overrides(cfg: ExperimentConfig, **kw) -> ExperimentConfig:
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None})
