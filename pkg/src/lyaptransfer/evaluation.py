"""Open-loop evaluation: divergence time, position MSE, data-fraction sweeps and
Monte-Carlo goal reaching."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .net import Mlp, OptimizerState, train_pointwise
from .systems import (DynamicalSystem, PolicySpec, TransitionDataset, generate_dataset, make_system,
                      perturb_system, rollout_true)
from .transfer import TransferMethod, fit_transfer

log = logging.getLogger(__name__)

SWEEP_HEADER = "method,data_fraction,seed,mean_divergence_time,mean_mse,n_eval_traj"
PLANNER_HEADER = "distance_steps,trials,successes,success_rate"
DEFAULT_FRACTIONS = (0.005, 0.01, 0.02, 0.05, 0.1, 0.2)


class SystemPredictor:
    """Wraps a true system so it can stand in for a learned predictor."""

    def __init__(self, sys: DynamicalSystem):
        self.sys = sys
        self.state_dim = sys.state_dim
        self.action_dim = sys.action_dim

    def predict(self, x0, actions=None, n: Optional[int] = None) -> np.ndarray:
        return rollout_true(self.sys, np.atleast_2d(x0), actions, n)


@dataclass
class RolloutResult:
    predicted: np.ndarray
    truth: np.ndarray
    errors: np.ndarray
    divergence_time: int
    eps: float


def position_errors(predicted, truth, position_dims=None) -> np.ndarray:
    predicted = np.asarray(predicted, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if predicted.shape != truth.shape:
        raise ValueError(f"length mismatch: {predicted.shape} vs {truth.shape}")
    if predicted.ndim == 1:
        predicted, truth = predicted[:, None], truth[:, None]
    dims = slice(None) if position_dims is None else list(position_dims)
    return np.linalg.norm(predicted[..., dims] - truth[..., dims], axis=-1)


def divergence_time(predicted, truth, eps: float, position_dims=None) -> int:
    """Last step index up to which every prefix error stays below ``eps``.

    Sequences hold states x_0..x_n; if the threshold is never reached the
    result is n.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    err = position_errors(predicted, truth, position_dims)
    bad = np.flatnonzero(err >= eps)
    if bad.size == 0:
        return len(err) - 1
    return max(int(bad[0]) - 1, 0)


def compare_rollout(predicted, truth, eps: float, position_dims=None) -> RolloutResult:
    err = position_errors(predicted, truth, position_dims)
    return RolloutResult(np.asarray(predicted), np.asarray(truth), err,
                         divergence_time(predicted, truth, eps, position_dims), eps)


@dataclass
class EvalSummary:
    mean_divergence_time: float
    mean_mse: float
    n_eval_traj: int
    divergence_times: list = field(default_factory=list)
    mses: list = field(default_factory=list)


def held_out_trajectories(test_set: TransitionDataset, horizon: int):
    """(x0, actions, true states) per test trajectory, cut to ``horizon`` steps."""
    out = []
    for rows in test_set.trajectories():
        rows = rows[:horizon]
        if len(rows) == 0:
            continue
        states = np.vstack([test_set.x[rows], test_set.xp[rows[-1]][None]])
        out.append((test_set.x[rows[0]], test_set.mu[rows], states))
    return out


def evaluate_method(model, truth_target: Optional[DynamicalSystem], test_set: TransitionDataset,
                    eps: float = 0.004, position_dims=(0, 1), horizon: int = 1000,
                    train_ids: Optional[Sequence[int]] = None) -> EvalSummary:
    """Roll each test trajectory's recorded actions open loop through ``model``.

    The reference path is the recorded states, or a fresh rollout of
    ``truth_target`` from the recorded start when it is given.  MSE is the mean
    squared Euclidean position error over steps 1..n.
    """
    if train_ids is not None:
        overlap = set(np.asarray(train_ids).tolist()) & set(test_set.traj_id.tolist())
        if overlap:
            raise ValueError(f"test trajectories overlap training data: {sorted(overlap)[:5]}")
    trajs = held_out_trajectories(test_set, horizon)
    if not trajs:
        raise ValueError("no test trajectories")
    by_len: dict[int, list[int]] = {}
    for i, (_, acts, _) in enumerate(trajs):
        by_len.setdefault(len(acts), []).append(i)
    div = np.empty(len(trajs))
    mse = np.empty(len(trajs))
    for n, idx in sorted(by_len.items()):
        x0 = np.stack([trajs[i][0] for i in idx])
        acts = np.stack([trajs[i][1] for i in idx])
        a = acts if model.action_dim else None
        pred = model.predict(x0, a, n)
        if truth_target is not None:
            truth = rollout_true(truth_target, x0, a, n)
        else:
            truth = np.stack([trajs[i][2] for i in idx])
        for k, i in enumerate(idx):
            err = position_errors(pred[k], truth[k], position_dims)
            div[i] = divergence_time(pred[k], truth[k], eps, position_dims)
            # nan/inf predictions count as maximal error
            e2 = np.where(np.isfinite(err[1:]), err[1:] ** 2, np.inf)
            mse[i] = float(np.mean(e2))
    return EvalSummary(float(div.mean()), float(mse.mean()), len(trajs), div.tolist(), mse.tolist())


# -- sweeps -------------------------------------------------------------------

def subsample_trajectories(data: TransitionDataset, fraction: float, seed: int) -> TransitionDataset:
    """Take whole trajectories in a seeded random order until ``fraction`` of the
    triples is reached; the last one contributes a contiguous prefix."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    want = int(round(fraction * len(data)))
    if want == 0:
        raise ValueError(f"fraction {fraction} of {len(data)} triples selects no data")
    trajs = data.trajectories()
    order = np.random.default_rng([seed, 5]).permutation(len(trajs))
    rows, have = [], 0
    for k in order:
        take = trajs[k][:want - have]
        rows.append(take)
        have += len(take)
        if have >= want:
            break
    return data.select(np.concatenate(rows))


@dataclass
class ExperimentConfig:
    """Everything needed to reproduce one source/target transfer experiment."""

    system: str = "hand_surrogate"
    system_params: dict = field(default_factory=dict)
    system_settings: dict = field(default_factory=dict)
    perturbation: float = 0.1
    policy: PolicySpec = field(default_factory=PolicySpec)
    n_source_traj: int = 300
    source_traj_len: int = 1000
    n_target_traj: int = 300
    target_traj_len: int = 1000
    n_test_traj: int = 20
    test_traj_len: int = 1000
    hidden: int = 128
    dropout: tuple = (0.1, 0.1)
    source_epochs: int = 20
    source_batch: int = 256
    source_lr: float = 1e-3
    eps_div: float = 0.004
    position_dims: tuple = (0, 1)
    horizon: int = 1000


@dataclass
class Experiment:
    """Systems, datasets and the trained source model for one seed."""

    cfg: ExperimentConfig
    seed: int
    source_sys: DynamicalSystem
    target_sys: DynamicalSystem
    source_data: TransitionDataset
    target_pool: TransitionDataset
    test_set: TransitionDataset
    source_model: Mlp


def train_source(cfg: ExperimentConfig, data: TransitionDataset, seed: int) -> Mlp:
    m = Mlp(data.state_dim, data.action_dim, cfg.hidden, cfg.dropout, seed=seed)
    m.fit_normalization(data.x, data.mu if data.action_dim else None, data.xp - data.x)
    tl = train_pointwise(m, data, OptimizerState(lr=cfg.source_lr), cfg.source_epochs,
                         cfg.source_batch, rng_seed=seed)
    m.training_meta = {"final_loss": tl.final, "epochs": cfg.source_epochs, "n_data": len(data)}
    return m


def build_experiment(cfg: ExperimentConfig, seed: int) -> Experiment:
    src = make_system(cfg.system, cfg.system_params, cfg.system_settings)
    tgt = perturb_system(src, cfg.perturbation, seed)
    sdata = generate_dataset(src, cfg.policy, cfg.n_source_traj, cfg.source_traj_len, seed=seed)
    pool = generate_dataset(tgt, cfg.policy, cfg.n_target_traj, cfg.target_traj_len, seed=seed + 10_000)
    test = generate_dataset(tgt, cfg.policy, cfg.n_test_traj, cfg.test_traj_len, seed=seed + 10_000,
                            first_traj_id=cfg.n_target_traj)
    model = train_source(cfg, sdata, seed)
    return Experiment(cfg, seed, src, tgt, sdata, pool, test, model)


@dataclass
class SweepResult:
    rows: list  # dicts with SWEEP_HEADER keys

    def to_csv_text(self) -> str:
        lines = [SWEEP_HEADER]
        for r in self.rows:
            lines.append(f"{r['method']},{r['data_fraction']!r},{r['seed']},{r['mean_divergence_time']!r},"
                         f"{r['mean_mse']!r},{r['n_eval_traj']}")
        return "\n".join(lines) + "\n"


def run_cell(exp: Experiment, method: TransferMethod, fraction: float) -> dict:
    target = subsample_trajectories(exp.target_pool, fraction, exp.seed)
    fitted = fit_transfer(method, exp.source_model, exp.source_data, target, seed=exp.seed)
    summ = evaluate_method(fitted, None, exp.test_set, exp.cfg.eps_div, exp.cfg.position_dims,
                           exp.cfg.horizon, train_ids=np.unique(target.traj_id))
    return {"method": method.kind, "data_fraction": float(fraction), "seed": int(exp.seed),
            "mean_divergence_time": summ.mean_divergence_time, "mean_mse": summ.mean_mse,
            "n_eval_traj": summ.n_eval_traj}


def run_sweep(methods: Sequence[TransferMethod], fractions: Sequence[float], seeds: Sequence[int],
              cfg: ExperimentConfig, workers: int = 1) -> SweepResult:
    """Fit and evaluate every (method, fraction, seed) cell."""
    fractions = list(fractions)
    if fractions != sorted(fractions):
        raise ValueError("fractions must be sorted ascending")
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(workers) as pool:
            parts = list(pool.map(_sweep_seed, [(list(methods), fractions, s, cfg) for s in seeds]))
        rows = [r for p in parts for r in p]
    else:
        rows = [r for s in seeds for r in _sweep_seed((list(methods), fractions, s, cfg))]
    rows.sort(key=lambda r: (r["method"], r["data_fraction"], r["seed"]))
    return SweepResult(rows)


def _sweep_seed(args) -> list:
    methods, fractions, seed, cfg = args
    exp = build_experiment(cfg, seed)
    rows = []
    for frac in fractions:
        for m in methods:
            rows.append(run_cell(exp, m, frac))
            log.info("cell method=%s fraction=%s seed=%s divergence=%.2f",
                     m.kind, frac, seed, rows[-1]["mean_divergence_time"])
    return rows


def plot_series(result: SweepResult) -> dict[str, str]:
    """Per-figure plain-text series: fraction vs. mean divergence time / MSE, one block per method."""
    out = {}
    for metric in ("mean_divergence_time", "mean_mse"):
        lines = [f"# x=data_fraction y={metric} (mean over seeds)"]
        for method in sorted({r["method"] for r in result.rows}):
            lines.append(f"# method={method}")
            fr = sorted({r["data_fraction"] for r in result.rows if r["method"] == method})
            for f in fr:
                vals = [r[metric] for r in result.rows if r["method"] == method and r["data_fraction"] == f]
                lines.append(f"{f!r} {float(np.mean(vals))!r}")
            lines.append("")
        out[metric] = "\n".join(lines)
    return out


# -- planning -----------------------------------------------------------------

@dataclass
class PlannerTask:
    goal: np.ndarray
    tolerance: float = 0.01
    horizon: int = 20
    n_samples: int = 1000
    policy: PolicySpec = field(default_factory=PolicySpec)
    position_dims: tuple = (0, 1)

    def __post_init__(self):
        if self.tolerance <= 0:
            raise ValueError("tolerance must be positive")
        if self.n_samples < 1:
            raise ValueError("n_samples must be at least 1")


def plan_open_loop(model, task: PlannerTask, x0, seed: int, extra_candidates=None) -> np.ndarray:
    """Random shooting: the sampled sequence whose predicted terminal position is
    nearest the goal (lowest index on ties).  ``extra_candidates`` (C, H, A) are
    placed before the random samples."""
    a_dim = model.action_dim
    rng = np.random.default_rng([seed, 11])
    cands = np.stack([task.policy.sample(rng, task.horizon, a_dim) for _ in range(task.n_samples)])
    if extra_candidates is not None:
        cands = np.concatenate([np.asarray(extra_candidates, dtype=float).reshape(-1, task.horizon, a_dim),
                                cands])
    if task.horizon == 0:
        return cands[0]
    x0 = np.broadcast_to(np.asarray(x0, dtype=float), (len(cands), model.state_dim))
    pred = model.predict(x0, cands, task.horizon)
    term = pred[:, -1, list(task.position_dims)]
    dist = np.linalg.norm(term - np.asarray(task.goal), axis=1)
    dist = np.where(np.isfinite(dist), dist, np.inf)
    return cands[int(np.argmin(dist))]


def execute_plan(truth: DynamicalSystem, x0, actions, task: PlannerTask) -> bool:
    """Run the plan on the true system and test the terminal position against the goal."""
    final = rollout_true(truth, x0, actions)[-1]
    return bool(np.linalg.norm(final[list(task.position_dims)] - np.asarray(task.goal)) < task.tolerance)


@dataclass
class PlannerConfig:
    start: Optional[np.ndarray] = None  # defaults to the centre of the state box
    n_samples: int = 1000
    tolerance: float = 0.01
    policy: PolicySpec = field(default_factory=PolicySpec)
    position_dims: tuple = (0, 1)
    seed: int = 0


def planner_success_curve(model, truth_target: DynamicalSystem, distances: Sequence[int], trials: int,
                          cfg: PlannerConfig) -> list[dict]:
    """Success rate of model-based open-loop planning for goals ``d`` steps away.

    Each goal is the terminal position of the true system after a random
    ``d``-step action sequence from the start, so it is reachable in ``d`` steps.
    """
    if trials < 1:
        raise ValueError("trials must be at least 1")
    start = cfg.start if cfg.start is not None else (truth_target.low + truth_target.high) / 2
    rows = []
    for d in distances:
        succ = 0
        for k in range(trials):
            rng = np.random.default_rng([cfg.seed, int(d), k])
            goal_acts = cfg.policy.sample(rng, int(d), truth_target.action_dim)
            goal = rollout_true(truth_target, start, goal_acts)[-1][list(cfg.position_dims)]
            task = PlannerTask(goal, cfg.tolerance, int(d), cfg.n_samples, cfg.policy, cfg.position_dims)
            plan = plan_open_loop(model, task, start, seed=int(rng.integers(2**31)))
            succ += execute_plan(truth_target, start, plan, task)
        rows.append({"distance_steps": int(d), "trials": trials, "successes": succ,
                     "success_rate": succ / trials})
    return rows


def planner_csv_text(rows: list[dict]) -> str:
    lines = [PLANNER_HEADER]
    for r in rows:
        lines.append(f"{r['distance_steps']},{r['trials']},{r['successes']},{r['success_rate']!r}")
    return "\n".join(lines) + "\n"
