"""Transferring a source transition model to a data-poor target system.

Six strategies are supported: training a new model, using the source model
directly, pointwise fine-tuning, fine-tuning through rollouts, and the
cumulative (and recurrent) residual predictors.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .io import atomic_write_text
from .lyapunov import estimate_spectrum
from .net import Mlp, OptimizerState, TrainingLog, backprop_through_rollout, rollout, train_pointwise
from .systems import PolicySpec, TransitionDataset

log = logging.getLogger(__name__)

KINDS = ("new_model", "direct", "naive_finetune", "trajectory_finetune",
         "cumulative_residual", "recurrent_residual")


@dataclass
class TransferMethod:
    """Transfer strategy and its hyperparameters.

    Only the fields relevant to ``kind`` are used; ``validate`` checks them.
    """

    kind: str = "cumulative_residual"
    # pointwise training (new_model, naive_finetune, residual nets)
    epochs: int = 100
    batch: int = 64
    lr: float = 1e-3
    hidden: int = 128
    # trajectory fine-tuning
    horizon: int = 50
    segment_stride: int = 10
    traj_batch: int = 16
    traj_epochs: int = 30
    # residual predictors
    alpha: float = 0.3
    gamma: float = 0.9997
    gamma_auto: bool = False
    alpha_in_output: bool = True
    residual_rounds: int = 3

    def validate(self) -> "TransferMethod":
        if self.kind not in KINDS:
            raise ValueError(f"unknown transfer method '{self.kind}', expected one of {KINDS}")
        if self.kind in ("cumulative_residual", "recurrent_residual"):
            if not 0.0 <= self.alpha <= 1.0:
                raise ValueError("alpha must lie in [0, 1]")
            if self.alpha_in_output and self.alpha == 0.0:
                raise ValueError("alpha must be positive when applied to the output")
            if not 0.0 <= self.gamma <= 1.0:
                raise ValueError("gamma must lie in [0, 1]")
        if self.kind == "trajectory_finetune" and self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        return self


@dataclass
class ResidualComposite:
    """Frozen source model plus a residual network accumulated with discount gamma."""

    source: Mlp
    residual: Mlp
    alpha: float = 0.3
    gamma: float = 0.9997
    recurrent: bool = False
    alpha_in_output: bool = True

    @property
    def out_weight(self) -> float:
        return self.alpha if self.alpha_in_output else 1.0

    def rollout_parts(self, x0, actions=None, n: Optional[int] = None):
        """Batched source chain x and residual chain y, each (B, n+1, N)."""
        x = np.atleast_2d(np.asarray(x0, dtype=float))
        bsz, sd = x.shape
        if self.source.action_dim:
            actions = np.asarray(actions, dtype=float).reshape(bsz, -1, self.source.action_dim)
            n = actions.shape[1]
        xs = np.empty((bsz, n + 1, sd))
        ys = np.zeros((bsz, n + 1, sd))
        xs[:, 0] = x
        y = np.zeros_like(x)
        for i in range(n):
            mu = actions[:, i] if self.source.action_dim else None
            extra = x + self.alpha * y if self.recurrent else None
            y = self.residual.forward(x, mu, extra) + self.gamma * y
            x = self.source.forward(x, mu)
            xs[:, i + 1] = x
            ys[:, i + 1] = y
        return xs, ys

    def predict(self, x0, actions=None, n: Optional[int] = None) -> np.ndarray:
        xs, ys = self.rollout_parts(x0, actions, n)
        return xs + self.out_weight * ys


class TransferredModel:
    """A fitted transfer result: a plain network or a residual composite."""

    def __init__(self, kind: str, model: Optional[Mlp] = None,
                 composite: Optional[ResidualComposite] = None, source_ref: Optional[str] = None,
                 meta: Optional[dict] = None):
        if (model is None) == (composite is None):
            raise ValueError("exactly one of model / composite is required")
        self.kind = kind
        self.model = model
        self.composite = composite
        self.source_ref = source_ref
        self.meta = dict(meta or {})

    @property
    def state_dim(self) -> int:
        return (self.model or self.composite.source).state_dim

    @property
    def action_dim(self) -> int:
        return (self.model or self.composite.source).action_dim

    def predict(self, x0, actions=None, n: Optional[int] = None) -> np.ndarray:
        """Open-loop prediction of x_0..x_n for a batch of start states (B, N)."""
        x0 = np.atleast_2d(np.asarray(x0, dtype=float))
        if x0.shape[1] != self.state_dim:
            raise ValueError(f"start state has dimension {x0.shape[1]}, model expects {self.state_dim}")
        if self.composite is not None:
            return self.composite.predict(x0, actions, n)
        return rollout(self.model, x0, actions, n)

    def to_dict(self) -> dict:
        if self.model is not None:
            d = self.model.to_dict()
            d.update(method_kind=self.kind, alpha=None, gamma=None)
        else:
            c = self.composite
            d = c.residual.to_dict()
            d.update(method_kind=self.kind, alpha=c.alpha, gamma=c.gamma, recurrent=c.recurrent,
                     alpha_in_output=c.alpha_in_output, source=c.source.to_dict())
        d["source_checkpoint_ref"] = self.source_ref
        d["transfer_meta"] = self.meta
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TransferredModel":
        from .net import CheckpointError
        if "method_kind" not in d:
            # a bare network checkpoint acts as a directly used model
            return cls("direct", model=Mlp.from_dict(d))
        kind = d["method_kind"]
        if kind in ("cumulative_residual", "recurrent_residual"):
            for key in ("alpha", "gamma", "source"):
                if key not in d:
                    raise CheckpointError(f"checkpoint is missing field '{key}'")
            comp = ResidualComposite(Mlp.from_dict(d["source"]), Mlp.from_dict(d), d["alpha"], d["gamma"],
                                     d.get("recurrent", kind == "recurrent_residual"),
                                     d.get("alpha_in_output", True))
            return cls(kind, composite=comp, source_ref=d.get("source_checkpoint_ref"),
                       meta=d.get("transfer_meta"))
        return cls(kind, model=Mlp.from_dict(d), source_ref=d.get("source_checkpoint_ref"),
                   meta=d.get("transfer_meta"))

    def save(self, path) -> None:
        atomic_write_text(path, json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "TransferredModel":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def predict_trajectory(model, x0, actions=None, n: Optional[int] = None) -> np.ndarray:
    """Open-loop rollout of any predictor exposing ``predict``; unbatched in, unbatched out."""
    x0 = np.asarray(x0, dtype=float)
    if x0.ndim == 1:
        acts = None if actions is None else np.asarray(actions, dtype=float)[None]
        if acts is not None and acts.shape[-1] == 0:
            n = acts.shape[1] if n is None else n
            acts = None
        return model.predict(x0[None], acts, n)[0]
    return model.predict(x0, actions, n)


# -- fitting ------------------------------------------------------------------

def rollout_segments(data: TransitionDataset, horizon: int, stride: int):
    """Contiguous windows of ``horizon`` transitions (shorter trajectories give one shorter window).

    Returns a dict mapping window length to (x0, actions, targets) arrays.
    """
    groups: dict[int, list] = {}
    short = 0
    for rows in data.trajectories():
        L = len(rows)
        if L == 0:
            continue
        n = min(horizon, L)
        if n < horizon:
            short += 1
        for s in range(0, L - n + 1, max(1, stride)):
            groups.setdefault(n, []).append(rows[s:s + n])
    if short:
        log.info("horizon=%d exceeds %d trajectories; shorter segments used", horizon, short)
    out = {}
    for n, segs in groups.items():
        idx = np.array(segs)
        out[n] = (data.x[idx[:, 0]], data.mu[idx], data.xp[idx])
    return out


def trajectory_finetune(model: Mlp, data: TransitionDataset, method: TransferMethod,
                        seed: int = 0) -> TrainingLog:
    """Fine-tune through open-loop rollouts with 1/i step weights, dropout active."""
    groups = rollout_segments(data, method.horizon, method.segment_stride)
    opt = OptimizerState(lr=method.lr)
    rng = np.random.default_rng([seed, 31])
    tlog = TrainingLog()
    batches = []
    for n, (x0, acts, tgt) in sorted(groups.items()):
        batches.append((n, x0, acts, tgt))
    model.train()
    for _ in range(method.traj_epochs):
        jobs = []
        for gi, (n, x0, _, _) in enumerate(batches):
            perm = rng.permutation(len(x0))
            jobs += [(gi, perm[s:s + method.traj_batch]) for s in range(0, len(x0), method.traj_batch)]
        order = rng.permutation(len(jobs))
        total = 0.0
        for j in order:
            gi, idx = jobs[j]
            n, x0, acts, tgt = batches[gi]
            loss, grads = backprop_through_rollout(model, x0[idx], acts[idx], tgt[idx])
            opt.step(model.params, grads)
            total += loss
        tlog.losses.append(total / max(1, len(jobs)))
    model.eval()
    return tlog


def _residual_net(source: Mlp, seed: int, hidden: int, extra_dim: int = 0) -> Mlp:
    g = Mlp(source.state_dim, source.action_dim, hidden, source.dropout, seed=seed,
            residual=False, extra_dim=extra_dim)
    # inputs share the source model's standardization
    n = source.state_dim + source.action_dim
    g.in_mean[:n] = source.in_mean
    g.in_std[:n] = source.in_std
    if extra_dim:
        g.in_mean[n:] = source.in_mean[:source.state_dim]
        g.in_std[n:] = source.in_std[:source.state_dim]
    return g


def _set_out_scale(g: Mlp, target: np.ndarray) -> None:
    std = target.std(axis=0)
    g.out_std = np.where(std > 1e-12, std, 1.0)


def auto_gamma(source: Mlp, gamma: float, x0, seed: int, n_steps: int = 2000) -> float:
    """Cap gamma at exp(min(lambda_min(source), 0))."""
    acts = None
    if source.action_dim:
        rng = np.random.default_rng([seed, 97])
        acts = PolicySpec().sample(rng, n_steps + n_steps // 10 + 100, source.action_dim)
    spectrum = estimate_spectrum(source, x0, acts, n_steps)
    return min(gamma, math.exp(min(spectrum.min, 0.0)))


def fit_cumulative_residual(source: Mlp, data: TransitionDataset, method: TransferMethod,
                            seed: int = 0) -> ResidualComposite:
    g = _residual_net(source, seed, method.hidden)
    mu = data.mu if source.action_dim else None
    target = data.xp - source.forward(data.x, mu)
    if method.alpha_in_output:
        target = target / method.alpha
    _set_out_scale(g, target)
    train_pointwise(g, data, OptimizerState(lr=method.lr), method.epochs, method.batch,
                    rng_seed=seed, target=target)
    return ResidualComposite(source, g, method.alpha, method.gamma, False, method.alpha_in_output)


def fit_recurrent_residual(source: Mlp, data: TransitionDataset, method: TransferMethod,
                           seed: int = 0) -> ResidualComposite:
    """Residual net that also sees the adjusted state x + alpha y.

    Training inputs come from rolling the composite along target segments;
    each round retrains on the per-step correction that would make the
    emitted state exact.
    """
    n_state = source.state_dim
    g = _residual_net(source, seed, method.hidden, extra_dim=n_state)
    g.zero_output()
    comp = ResidualComposite(source, g, method.alpha, method.gamma, True, method.alpha_in_output)
    groups = rollout_segments(data, method.horizon, method.horizon)
    opt = OptimizerState(lr=method.lr)
    w = comp.out_weight
    for rnd in range(max(1, method.residual_rounds)):
        xs_in, mus, extras, targets = [], [], [], []
        for n, (x0, acts, tgt) in sorted(groups.items()):
            xs, ys = comp.rollout_parts(x0, acts if source.action_dim else None, n)
            # correction needed at step i+1: w * (g_i + gamma y_i) = x*_{i+1} - x_{i+1}
            need = (tgt - xs[:, 1:]) / w - comp.gamma * ys[:, :-1]
            xs_in.append(xs[:, :-1].reshape(-1, n_state))
            mus.append(acts.reshape(acts.shape[0] * acts.shape[1], acts.shape[2]))
            extras.append((xs[:, :-1] + method.alpha * ys[:, :-1]).reshape(-1, n_state))
            targets.append(need.reshape(-1, n_state))
        x_in = np.concatenate(xs_in)
        target = np.concatenate(targets)
        rows = TransitionDataset(x_in, np.concatenate(mus), np.zeros_like(x_in),
                                 np.zeros(len(x_in), dtype=int), np.arange(len(x_in)))
        if rnd == 0:
            _set_out_scale(g, target)
        train_pointwise(g, rows, opt, method.epochs, method.batch, rng_seed=seed + rnd,
                        target=target, extra=np.concatenate(extras))
    return comp


def fit_transfer(method: TransferMethod, source_model: Mlp, source_data: Optional[TransitionDataset],
                 target_data: Optional[TransitionDataset], seed: int = 0,
                 source_ref: Optional[str] = None) -> TransferredModel:
    """Fit one transfer strategy. ``source_model`` is never modified."""
    method.validate()
    kind = method.kind
    if kind != "direct" and (target_data is None or len(target_data) == 0):
        raise ValueError(f"{kind} needs a nonempty target dataset")
    meta = {"method": asdict(method), "seed": int(seed),
            "n_target": 0 if target_data is None else len(target_data)}

    if kind == "direct":
        return TransferredModel(kind, model=source_model.copy(), source_ref=source_ref, meta=meta)

    if kind == "new_model":
        m = Mlp(source_model.state_dim, source_model.action_dim, method.hidden, source_model.dropout,
                seed=seed)
        m.fit_normalization(target_data.x, target_data.mu if m.action_dim else None,
                            target_data.xp - target_data.x)
        tl = train_pointwise(m, target_data, OptimizerState(lr=method.lr), method.epochs,
                             method.batch, rng_seed=seed)
        meta["final_loss"] = tl.final
        return TransferredModel(kind, model=m, source_ref=source_ref, meta=meta)

    if kind == "naive_finetune":
        m = source_model.copy(seed=seed)
        tl = train_pointwise(m, target_data, OptimizerState(lr=method.lr), method.epochs,
                             method.batch, rng_seed=seed)
        meta["final_loss"] = tl.final
        return TransferredModel(kind, model=m, source_ref=source_ref, meta=meta)

    if kind == "trajectory_finetune":
        m = source_model.copy(seed=seed)
        tl = trajectory_finetune(m, target_data, method, seed)
        meta["final_loss"] = tl.final
        return TransferredModel(kind, model=m, source_ref=source_ref, meta=meta)

    frozen = source_model.copy()
    frozen.eval()
    if kind == "cumulative_residual":
        comp = fit_cumulative_residual(frozen, target_data, method, seed)
    else:
        comp = fit_recurrent_residual(frozen, target_data, method, seed)
    if method.gamma_auto:
        comp.gamma = auto_gamma(frozen, method.gamma, target_data.x[0], seed)
        meta["gamma_effective"] = comp.gamma
    return TransferredModel(kind, composite=comp, source_ref=source_ref, meta=meta)
