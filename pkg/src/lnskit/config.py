"""Declarative experiment configuration (JSON).

Every section is a dataclass; unknown keys are rejected with the dotted path
of the offending field.  Defaults form the 8-bit preset: B=8, gamma=8 for
QW/QA/QE/QG, Madam with eta=2**-7, 16-bit QU and a 24-bit accumulator.
"""
from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .errors import ConfigError

TASKS = ("train", "base-factor-sweep", "qu-bitwidth-sweep", "theorem-check",
         "datapath-conformance", "tally-report")
ROLES = ("QW", "QA", "QE", "QG")


@dataclass
class DatasetSpec:
    name: str = "digits"
    n: int = 4000
    test_fraction: float = 0.25
    params: dict = field(default_factory=lambda: {"noise": 0.25})


@dataclass
class NetworkSpec:
    hidden: list = field(default_factory=lambda: [64])
    activation: str = "relu"


@dataclass
class QuantSpec:
    enabled: bool = True
    roles: list = field(default_factory=lambda: list(ROLES))
    bitwidth: int = 8
    gamma: int = 8
    rounding: str = "nearest"
    weight_granularity: str = "per-channel"
    activation_granularity: str = "per-tensor"
    error_granularity: str = "per-tensor"
    gradient_granularity: str = "per-tensor"
    conversion: str = "real"


@dataclass
class MacSpec:
    vector_size: int = 32
    accumulator_bits: int = 24
    fractional_bits: int = 23


@dataclass
class OptimizerSpec:
    algorithm: str = "MADAM"
    eta: float = 2.0**-7
    beta2: float = 0.999
    beta1: float = 0.9
    qu_bitwidth: int = 16
    qu_rounding: str = "nearest"
    store_mode: str = "direct"
    headroom: float = 1.0
    warmup_steps: int = 0
    warmup_lr: float = 0.1


@dataclass
class TrainingSpec:
    steps: int = 3000
    batch_size: int = 64
    eval_every: int = 250
    baseline: bool = True
    baseline_algorithm: str = "GD"
    baseline_eta: float = 0.1


@dataclass
class SweepSpecConfig:
    gamma_grid: list = field(default_factory=lambda: [1, 2, 4, 8, 16, 32])
    gamma_steps: int = 300
    qu_bitwidths: list = field(default_factory=lambda: [16, 14, 12, 10])
    qu_algorithms: list = field(default_factory=lambda: ["MADAM", "GD"])
    qu_etas: dict = field(default_factory=lambda: {"MADAM": 2.0**-7, "GD": 0.1})
    qu_steps: int = 2000
    replicas: int = 1


@dataclass
class TheoremSpec:
    eta_grid: list = field(default_factory=lambda: [2.0**-k for k in range(3, 10)])
    eta_sweep_gamma: int = 2**10
    gamma_grid: list = field(default_factory=lambda: [2**k for k in range(6, 13)])
    gamma_sweep_eta: float = 2.0**-6
    algorithms: list = field(default_factory=lambda: ["GD", "MUL", "SIGN_MUL"])
    trials: int = 256
    d: int = 1024
    grad_scale: float = 1e-4
    sr_vectors: int = 100
    sr_dim: int = 100
    sr_trials: int = 10000


@dataclass
class TallySpec:
    batch: int = 64
    hybrid_splits: list = field(default_factory=lambda: [0, 1, 2, 3])


@dataclass
class ExperimentConfig:
    task: str = "train"
    seed: int = 0
    out: Optional[str] = None
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    network: NetworkSpec = field(default_factory=NetworkSpec)
    quant: QuantSpec = field(default_factory=QuantSpec)
    mac: MacSpec = field(default_factory=MacSpec)
    optimizer: OptimizerSpec = field(default_factory=OptimizerSpec)
    training: TrainingSpec = field(default_factory=TrainingSpec)
    sweep: SweepSpecConfig = field(default_factory=SweepSpecConfig)
    theorem: TheoremSpec = field(default_factory=TheoremSpec)
    tally: TallySpec = field(default_factory=TallySpec)
    golden_file: Optional[str] = None

    def __post_init__(self):
        validate(self)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        return _build(cls, data, "")

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        return cls.from_dict(data)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_json(Path(path).read_text())


_SCALARS = {int: int, float: float, str: str, bool: bool}


def _check_scalar(tp, value, where):
    if tp is bool:
        ok = isinstance(value, bool)
    elif tp is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif tp is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    else:
        ok = isinstance(value, tp)
    if not ok:
        raise ConfigError(f"{where}: expected {tp.__name__}, got {type(value).__name__}")
    return value


def _build(cls, data, prefix):
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix or 'config'}: expected an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown field{'s' if len(unknown) > 1 else ''}: "
                          + ", ".join(prefix + k for k in unknown))
    kwargs = {}
    for name, value in data.items():
        tp = hints[name]
        where = prefix + name
        if dataclasses.is_dataclass(tp):
            kwargs[name] = _build(tp, value, where + ".")
            continue
        if typing.get_origin(tp) is typing.Union:  # Optional[x]
            if value is None:
                kwargs[name] = None
                continue
            tp = next(a for a in typing.get_args(tp) if a is not type(None))
        if tp in _SCALARS:
            kwargs[name] = _check_scalar(tp, value, where)
        elif tp in (list, dict):
            if not isinstance(value, tp):
                raise ConfigError(f"{where}: expected {tp.__name__}, got {type(value).__name__}")
            kwargs[name] = value
        else:  # pragma: no cover
            kwargs[name] = value
    return cls(**kwargs) if cls is ExperimentConfig else _construct(cls, kwargs)


def _construct(cls, kwargs):
    return cls(**kwargs)


def _pow2(v) -> bool:
    return isinstance(v, int) and v >= 1 and not v & (v - 1)


def validate(cfg: ExperimentConfig) -> None:
    """Range checks across sections; raises ConfigError naming the field."""
    if cfg.task not in TASKS:
        raise ConfigError(f"task: {cfg.task!r} is not one of {', '.join(TASKS)}")
    q, o, t = cfg.quant, cfg.optimizer, cfg.training
    if not 2 <= q.bitwidth <= 32:
        raise ConfigError(f"quant.bitwidth: {q.bitwidth} outside [2, 32]")
    if not _pow2(q.gamma):
        raise ConfigError(f"quant.gamma: {q.gamma} is not a power of two")
    for r in q.roles:
        if r not in ROLES:
            raise ConfigError(f"quant.roles: unknown role {r!r}")
    for name in ("rounding",):
        if getattr(q, name) not in ("nearest", "stochastic"):
            raise ConfigError(f"quant.{name}: {getattr(q, name)!r} is not nearest|stochastic")
    if o.qu_rounding not in ("nearest", "stochastic"):
        raise ConfigError(f"optimizer.qu_rounding: {o.qu_rounding!r} is not nearest|stochastic")
    if o.algorithm not in ("GD", "MUL", "SIGN_MUL", "MADAM"):
        raise ConfigError(f"optimizer.algorithm: unknown algorithm {o.algorithm!r}")
    if o.eta <= 0:
        raise ConfigError("optimizer.eta: must be positive")
    if not 0 < o.beta2 < 1 or not 0 < o.beta1 < 1:
        raise ConfigError("optimizer.beta1/beta2: must lie in (0, 1)")
    if o.store_mode not in ("direct", "shadow"):
        raise ConfigError(f"optimizer.store_mode: {o.store_mode!r} is not direct|shadow")
    if q.enabled and o.qu_bitwidth < q.bitwidth:
        raise ConfigError(f"optimizer.qu_bitwidth: {o.qu_bitwidth} is below the forward bitwidth {q.bitwidth}")
    if t.steps < 0 or t.batch_size < 1 or t.eval_every < 1:
        raise ConfigError("training: steps >= 0, batch_size >= 1 and eval_every >= 1 required")
    if t.baseline_algorithm not in ("GD", "MUL", "SIGN_MUL", "MADAM"):
        raise ConfigError(f"training.baseline_algorithm: unknown algorithm {t.baseline_algorithm!r}")
    if cfg.mac.accumulator_bits < 2 or cfg.mac.vector_size < 1:
        raise ConfigError("mac: accumulator_bits >= 2 and vector_size >= 1 required")
    s = cfg.sweep
    for g in s.gamma_grid:
        if not _pow2(g):
            raise ConfigError(f"sweep.gamma_grid: {g} is not a power of two")
    for bw in s.qu_bitwidths:
        if not isinstance(bw, int) or bw < q.bitwidth:
            raise ConfigError(f"sweep.qu_bitwidths: {bw} is below the forward bitwidth {q.bitwidth}")
    for a in s.qu_algorithms:
        if a not in s.qu_etas:
            raise ConfigError(f"sweep.qu_etas: no learning rate for {a!r}")
    if s.replicas < 1:
        raise ConfigError("sweep.replicas: must be >= 1")
    th = cfg.theorem
    if th.trials < 1 or th.d < 1:
        raise ConfigError("theorem: trials and d must be >= 1")
    if not th.eta_grid or not th.gamma_grid or not th.algorithms:
        raise ConfigError("theorem: grids must be non-empty")
    for b_m in cfg.tally.hybrid_splits:
        if not 0 <= b_m <= q.gamma.bit_length() - 1:
            raise ConfigError(f"tally.hybrid_splits: b_m={b_m} outside [0, log2(gamma)]")
