"""Run configuration: a TOML file with one section per concern.

Unknown keys and ill-typed values are rejected with the dotted field path, so
a typo never silently falls back to a default.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from typing import Any, Optional

import tomli

from .evaluation import DEFAULT_FRACTIONS, ExperimentConfig, PlannerConfig
from .lyapunov import BoundConfig
from .systems import SYSTEMS, PolicySpec
from .transfer import KINDS, TransferMethod


class ConfigError(ValueError):
    """Invalid configuration; ``path`` is the dotted location of the bad field."""

    def __init__(self, path: str, msg: str):
        super().__init__(f"{path}: {msg}")
        self.path = path


@dataclass
class SystemSection:
    name: str = "hand_surrogate"
    perturbation: float = 0.1
    params: dict = field(default_factory=dict)
    settings: dict = field(default_factory=dict)


@dataclass
class PolicySection:
    low: float = -1.0
    high: float = 1.0
    unit: float = 1.0
    hold_min: int = 1
    hold_max: int = 5


@dataclass
class DataSection:
    n_source_traj: int = 300
    source_traj_len: int = 1000
    n_target_traj: int = 300
    target_traj_len: int = 1000
    n_test_traj: int = 20
    test_traj_len: int = 1000
    noise_std: float = 0.0


@dataclass
class NetSection:
    hidden: int = 128
    dropout: list = field(default_factory=lambda: [0.1, 0.1])
    epochs: int = 20
    batch: int = 256
    lr: float = 1e-3


@dataclass
class TransferSection:
    method: str = "cumulative_residual"
    fraction: float = 0.02
    epochs: int = 100
    batch: int = 64
    lr: float = 1e-3
    hidden: int = 128
    horizon: int = 50
    segment_stride: int = 10
    traj_batch: int = 16
    traj_epochs: int = 30
    alpha: float = 0.3
    gamma: float = 0.9997
    gamma_auto: bool = False
    alpha_in_output: bool = True
    residual_rounds: int = 3


@dataclass
class EvalSection:
    eps_div: float = 0.004
    position_dims: list = field(default_factory=lambda: [0, 1])
    horizon: int = 1000
    fractions: list = field(default_factory=lambda: list(DEFAULT_FRACTIONS))
    methods: list = field(default_factory=lambda: list(KINDS))
    seeds: list = field(default_factory=lambda: [0])
    workers: int = 1


@dataclass
class PlannerSection:
    distances: list = field(default_factory=lambda: [5, 10, 20, 40])
    trials: int = 20
    n_samples: int = 1000
    tolerance: float = 0.01


@dataclass
class AuditSection:
    n_steps: int = 10_000
    n_transient: Optional[int] = None
    n_probes: int = 100_000
    n_pairs: int = 10_000
    proxy: bool = False
    truth: str = "target"  # which system the audited model should match: source or target


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs"
    system: SystemSection = field(default_factory=SystemSection)
    policy: PolicySection = field(default_factory=PolicySection)
    data: DataSection = field(default_factory=DataSection)
    net: NetSection = field(default_factory=NetSection)
    transfer: TransferSection = field(default_factory=TransferSection)
    eval: EvalSection = field(default_factory=EvalSection)
    planner: PlannerSection = field(default_factory=PlannerSection)
    audit: AuditSection = field(default_factory=AuditSection)

    # -- derived objects ------------------------------------------------------

    def policy_spec(self) -> PolicySpec:
        return PolicySpec(**dataclasses.asdict(self.policy))

    def method(self, kind: Optional[str] = None) -> TransferMethod:
        t = dataclasses.asdict(self.transfer)
        t.pop("fraction")
        t["kind"] = kind or t.pop("method")
        t.pop("method", None)
        return TransferMethod(**t)

    def experiment(self) -> ExperimentConfig:
        return ExperimentConfig(
            system=self.system.name, system_params=dict(self.system.params),
            system_settings=dict(self.system.settings), perturbation=self.system.perturbation,
            policy=self.policy_spec(),
            n_source_traj=self.data.n_source_traj, source_traj_len=self.data.source_traj_len,
            n_target_traj=self.data.n_target_traj, target_traj_len=self.data.target_traj_len,
            n_test_traj=self.data.n_test_traj, test_traj_len=self.data.test_traj_len,
            hidden=self.net.hidden, dropout=tuple(self.net.dropout), source_epochs=self.net.epochs,
            source_batch=self.net.batch, source_lr=self.net.lr, eps_div=self.eval.eps_div,
            position_dims=tuple(self.eval.position_dims), horizon=self.eval.horizon)

    def planner_config(self) -> PlannerConfig:
        return PlannerConfig(n_samples=self.planner.n_samples, tolerance=self.planner.tolerance,
                             policy=self.policy_spec(), position_dims=tuple(self.eval.position_dims),
                             seed=self.seed)

    def bound_config(self) -> BoundConfig:
        return BoundConfig(n_probes=self.audit.n_probes, n_pairs=self.audit.n_pairs, seed=self.seed,
                           n_transient=self.audit.n_transient, proxy=self.audit.proxy)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    # -- validation -------------------------------------------------------------

    def validate(self) -> "RunConfig":
        s = self
        if s.system.name not in SYSTEMS:
            raise ConfigError("system.name", f"unknown system '{s.system.name}', expected one of {sorted(SYSTEMS)}")
        if s.system.perturbation < 0:
            raise ConfigError("system.perturbation", "must be nonnegative")
        for name in ("n_source_traj", "source_traj_len", "n_target_traj", "target_traj_len",
                     "n_test_traj", "test_traj_len"):
            if getattr(s.data, name) < 1:
                raise ConfigError(f"data.{name}", "must be at least 1")
        if s.data.noise_std < 0:
            raise ConfigError("data.noise_std", "must be nonnegative")
        if s.policy.low > s.policy.high:
            raise ConfigError("policy.low", "must not exceed policy.high")
        if not 1 <= s.policy.hold_min <= s.policy.hold_max:
            raise ConfigError("policy.hold_min", "need 1 <= hold_min <= hold_max")
        if len(s.net.dropout) != 2 or not all(0 <= p < 1 for p in s.net.dropout):
            raise ConfigError("net.dropout", "need two rates in [0, 1)")
        for name in ("hidden", "epochs", "batch"):
            if getattr(s.net, name) < 1:
                raise ConfigError(f"net.{name}", "must be at least 1")
        if s.net.lr <= 0:
            raise ConfigError("net.lr", "must be positive")
        if not 0 < s.transfer.fraction <= 1:
            raise ConfigError("transfer.fraction", "must lie in (0, 1]")
        try:
            s.method().validate()
        except ValueError as exc:
            raise ConfigError("transfer.method" if "method" in str(exc) else "transfer", str(exc)) from None
        for i, m in enumerate(s.eval.methods):
            if m not in KINDS:
                raise ConfigError(f"eval.methods[{i}]", f"unknown method '{m}'")
        if s.eval.eps_div <= 0:
            raise ConfigError("eval.eps_div", "must be positive")
        if s.eval.horizon < 1:
            raise ConfigError("eval.horizon", "must be at least 1")
        if list(s.eval.fractions) != sorted(s.eval.fractions) or not all(0 < f <= 1 for f in s.eval.fractions):
            raise ConfigError("eval.fractions", "must be ascending values in (0, 1]")
        if s.eval.workers < 1:
            raise ConfigError("eval.workers", "must be at least 1")
        if any(d < 0 for d in s.planner.distances):
            raise ConfigError("planner.distances", "must be nonnegative")
        if s.planner.trials < 1 or s.planner.n_samples < 1:
            raise ConfigError("planner.trials", "trials and n_samples must be at least 1")
        if s.planner.tolerance <= 0:
            raise ConfigError("planner.tolerance", "must be positive")
        if s.audit.truth not in ("source", "target"):
            raise ConfigError("audit.truth", "must be 'source' or 'target'")
        if s.audit.n_steps < 1:
            raise ConfigError("audit.n_steps", "must be at least 1")
        return self


def _coerce(value: Any, default: Any, path: str) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected a boolean, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(path, f"expected a list, got {value!r}")
        return value
    if isinstance(default, dict):
        if not isinstance(value, dict):
            raise ConfigError(path, f"expected a table, got {value!r}")
        return value
    return value  # Optional fields default to None


def _fill(obj, table: dict, prefix: str):
    known = {f.name: f for f in fields(obj)}
    for key, value in table.items():
        path = f"{prefix}{key}"
        if key not in known:
            raise ConfigError(path, "unknown field")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError(path, "expected a table")
            _fill(current, value, path + ".")
        else:
            setattr(obj, key, _coerce(value, current, path))


def config_from_dict(table: dict) -> RunConfig:
    cfg = RunConfig()
    _fill(cfg, table, "")
    return cfg.validate()


def load_config(path: Optional[str]) -> RunConfig:
    """Read and validate a TOML run config; ``None`` gives the defaults."""
    if path is None:
        return RunConfig().validate()
    try:
        with open(path, "rb") as fh:
            table = tomli.load(fh)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError("<file>", f"{path}: {exc}") from None
    return config_from_dict(table)
