"""Experiment drivers shared by ``scripts/`` and the acceptance suite.

Each driver takes a small dataclass config whose defaults are the settings the
acceptance suite runs with.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .evaluation import (ExperimentConfig, PlannerConfig, build_experiment, evaluate_method,
                         planner_success_curve, subsample_trajectories)
from .lyapunov import BoundConfig, BoundReport, composite_spectrum, estimate_spectrum, theorem1_bound
from .net import Mlp, OptimizerState, train_full_batch, train_pointwise
from .systems import DynamicalSystem, PolicySpec, TransitionDataset, generate_dataset, make_system
from .transfer import TransferMethod, fit_transfer

log = logging.getLogger(__name__)


@dataclass
class TrainedModel:
    """A network together with the system and data it was fitted to."""

    label: str
    model: Mlp
    truth: DynamicalSystem
    data: TransitionDataset


# -- dataset-size ladder ------------------------------------------------------

@dataclass
class LadderConfig:
    sizes: tuple = (100, 1000, 10_000, 100_000)
    seeds: tuple = (0, 1, 2, 3, 4)
    rho: float = 3.5
    traj_len: int = 10
    hidden: int = 8
    max_iter: int = 2000
    x0: float = 0.3
    n_steps: int = 5000


@dataclass
class LadderResult:
    lambda_true: float
    errors: dict  # size -> |lambda_model - lambda_true| per seed
    models: list = field(default_factory=list)

    def mean_errors(self) -> list[float]:
        return [float(np.mean(self.errors[n])) for n in sorted(self.errors)]


def size_ladder(cfg: LadderConfig) -> LadderResult:
    """|lambda_model - lambda_true| on the logistic map for growing datasets.

    Every size gets the same optimizer budget (full-batch L-BFGS), so the
    sizes differ in data only.  The map sits close to a superstable cycle,
    which makes the exponent very sensitive to the fitted slope near x = 1/2;
    minibatch Adam never gets precise enough for the size effect to show.
    """
    truth = make_system("logistic", {"rho": cfg.rho})
    x0 = np.array([cfg.x0])
    lam_true = estimate_spectrum(truth, x0, n_steps=cfg.n_steps).max
    errors, models = {}, []
    for n in cfg.sizes:
        errors[n] = []
        for s in cfg.seeds:
            data = generate_dataset(truth, None, n_traj=max(1, n // cfg.traj_len), traj_len=cfg.traj_len, seed=s)
            m = Mlp(1, 0, hidden=cfg.hidden, dropout=(0.0, 0.0), seed=s)
            m.fit_normalization(data.x, None, data.xp - data.x)
            train_full_batch(m, data, cfg.max_iter)
            errors[n].append(abs(estimate_spectrum(m, x0, n_steps=cfg.n_steps).max - lam_true))
            models.append(TrainedModel(f"ladder n={n} seed={s}", m, truth, data))
        log.info("ladder size=%d mean_error=%.4f", n, np.mean(errors[n]))
    return LadderResult(lam_true, errors, models)


def non_increasing(values) -> bool:
    return all(b <= a for a, b in zip(values, values[1:]))


# -- composite exponent vs discount -------------------------------------------

@dataclass
class GammaCheckConfig:
    system: str = "pendulum"
    seeds: tuple = (0, 1, 2)
    gammas: tuple = (0.5, 0.9, 0.99)
    n_traj: int = 40
    traj_len: int = 200
    hidden: int = 32
    epochs: int = 10
    n_steps: int = 5000


def gamma_check(cfg: GammaCheckConfig) -> tuple[list[dict], list[TrainedModel]]:
    """Composite maximal exponent against max(lambda_source, ln gamma) for trained
    source and residual networks."""
    src = make_system(cfg.system)
    policy = PolicySpec()
    rows, models = [], []
    for s in cfg.seeds:
        data = generate_dataset(src, policy, cfg.n_traj, cfg.traj_len, seed=s)
        m = Mlp(src.state_dim, src.action_dim, cfg.hidden, seed=s)
        m.fit_normalization(data.x, data.mu, data.xp - data.x)
        train_pointwise(m, data, OptimizerState(lr=3e-3), cfg.epochs, 64, rng_seed=s)
        models.append(TrainedModel(f"{cfg.system} source seed={s}", m, src, data))
        acts = policy.sample(np.random.default_rng([s, 5]), cfg.n_steps + cfg.n_steps // 10, src.action_dim)
        x0 = data.x[0]
        lam = estimate_spectrum(m, x0, acts, cfg.n_steps).max
        for g in cfg.gammas:
            fitted = fit_transfer(TransferMethod(kind="cumulative_residual", gamma=g, epochs=cfg.epochs),
                                  m, data, data, seed=s)
            comp = fitted.composite
            comp.residual.eval()
            spectrum = composite_spectrum(comp.source, comp.residual, g, x0, acts, cfg.n_steps)
            expected = max(lam, math.log(g))
            rows.append({"seed": s, "gamma": g, "composite_max": spectrum.max, "expected": expected,
                         "abs_err": abs(spectrum.max - expected)})
    return rows, models


# -- transfer trend -----------------------------------------------------------

def trend_experiment() -> ExperimentConfig:
    return ExperimentConfig(n_source_traj=200, source_traj_len=500, n_target_traj=100, target_traj_len=500,
                            n_test_traj=30, test_traj_len=300, horizon=300, source_epochs=30)


def trend_methods() -> tuple:
    return (TransferMethod(kind="direct"), TransferMethod(kind="naive_finetune"),
            TransferMethod(kind="trajectory_finetune"),
            TransferMethod(kind="cumulative_residual", gamma_auto=True))


@dataclass
class TrendConfig:
    experiment: ExperimentConfig = field(default_factory=trend_experiment)
    fraction: float = 0.02
    seeds: tuple = tuple(range(10))
    methods: tuple = field(default_factory=trend_methods)


def transfer_trend(cfg: TrendConfig) -> tuple[dict, list[TrainedModel]]:
    """Mean divergence time per method (one entry per seed, in seed order) and
    every network fitted along the way."""
    times = {m.kind: [] for m in cfg.methods}
    models = []
    e = cfg.experiment
    for s in cfg.seeds:
        exp = build_experiment(e, s)
        models.append(TrainedModel(f"source seed={s}", exp.source_model, exp.source_sys, exp.source_data))
        target = subsample_trajectories(exp.target_pool, cfg.fraction, s)
        for meth in cfg.methods:
            fitted = fit_transfer(meth, exp.source_model, exp.source_data, target, seed=s)
            summ = evaluate_method(fitted, None, exp.test_set, e.eps_div, e.position_dims, e.horizon,
                                   train_ids=np.unique(target.traj_id))
            times[meth.kind].append(summ.mean_divergence_time)
            if meth.kind in ("naive_finetune", "trajectory_finetune", "new_model"):
                models.append(TrainedModel(f"{meth.kind} seed={s}", fitted.model, exp.target_sys, target))
        log.info("trend seed=%d %s", s, {k: round(v[-1], 1) for k, v in times.items()})
    return times, models


def trend_counts(times: dict) -> dict:
    d, n = np.array(times["direct"]), np.array(times["naive_finetune"])
    t, c = np.array(times["trajectory_finetune"]), np.array(times["cumulative_residual"])
    return {"cumulative_ge_direct": int(np.sum(c >= d)), "trajectory_ge_naive": int(np.sum(t >= n)),
            "naive_lt_direct": int(np.sum(n < d)), "n_seeds": len(d)}


# -- planner gap --------------------------------------------------------------

def planner_experiment() -> ExperimentConfig:
    return ExperimentConfig(system="pendulum", position_dims=(0,), n_source_traj=200, source_traj_len=500,
                            n_target_traj=100, target_traj_len=500, n_test_traj=2, test_traj_len=30,
                            horizon=30, source_epochs=30)


@dataclass
class PlannerGapConfig:
    experiment: ExperimentConfig = field(default_factory=planner_experiment)
    fraction: float = 0.02
    seeds: tuple = (0, 1, 2, 3, 4)
    distances: tuple = (5, 10, 20, 40)
    trials: int = 20
    n_samples: int = 1000
    tolerance: float = 0.01
    method: TransferMethod = field(default_factory=lambda: TransferMethod(kind="cumulative_residual",
                                                                          gamma_auto=True))


def planner_gap(cfg: PlannerGapConfig) -> tuple[dict, list[TrainedModel]]:
    """Planner success rates (one list per seed, ordered like ``distances``)."""
    rates, models = {}, []
    e = cfg.experiment
    for s in cfg.seeds:
        exp = build_experiment(e, s)
        models.append(TrainedModel(f"{e.system} source seed={s}", exp.source_model, exp.source_sys,
                                   exp.source_data))
        target = subsample_trajectories(exp.target_pool, cfg.fraction, s)
        fitted = fit_transfer(cfg.method, exp.source_model, exp.source_data, target, seed=s)
        pcfg = PlannerConfig(n_samples=cfg.n_samples, tolerance=cfg.tolerance, seed=s,
                             position_dims=e.position_dims, policy=e.policy)
        rows = planner_success_curve(fitted, exp.target_sys, cfg.distances, cfg.trials, pcfg)
        rates[s] = [r["success_rate"] for r in rows]
        log.info("planner seed=%d rates=%s", s, rates[s])
    return rates, models


def success_gap(rates: dict) -> float:
    r = np.array(list(rates.values()))
    return float(r[:, 0].mean() - r[:, -1].mean())


# -- bound audit --------------------------------------------------------------

def audit_models(models: list[TrainedModel], n_steps: int = 2000, n_probes: int = 20_000,
                 n_pairs: int = 2000, seed: int = 0) -> list[tuple[str, Optional[BoundReport], str]]:
    """Run the exponent bound for each trained model from its first training state."""
    out = []
    for tm in models:
        tm.model.eval()
        acts = None
        if tm.truth.action_dim:
            acts = PolicySpec().sample(np.random.default_rng([seed, 77]), n_steps + n_steps // 10,
                                       tm.truth.action_dim)
        cfg = BoundConfig(n_probes=n_probes, n_pairs=n_pairs, seed=seed)
        try:
            rep = theorem1_bound(tm.model, tm.truth, tm.data, tm.data.x[0], acts, n_steps, cfg)
            out.append((tm.label, rep, ""))
        except (ArithmeticError, ValueError) as exc:
            out.append((tm.label, None, f"{type(exc).__name__}: {exc}"))
    return out
