"""Lyapunov spectra along trajectories and the learned-model exponent bound.

Any object with ``step(x, mu)`` and ``jacobian(x, mu)`` (both accepting a
batch of states) can be analysed: ground-truth systems, trained networks, and
the coupled source/residual map.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .numerics import qr_decompose, spectral_norm

COND_LIMIT = 1e12
JAC_CHUNK = 4096


class LyapunovOverflowError(ArithmeticError):
    def __init__(self, step: int, msg: str = "trajectory left the finite range"):
        super().__init__(f"{msg} at step {step}")
        self.step = step


class SingularJacobianError(ArithmeticError):
    def __init__(self, step: int, cond: float):
        super().__init__(f"Jacobian is numerically singular at step {step} (condition {cond:.3g})")
        self.step = step
        self.cond = cond


@dataclass
class LyapunovSpectrum:
    exponents: np.ndarray  # descending, nats per step
    n_steps: int
    n_transient: int
    tail_delta: float  # |max exponent over last quarter - max exponent over full run|
    neg_inf: bool = False

    @property
    def max(self) -> float:
        return float(self.exponents[0])

    @property
    def min(self) -> float:
        return float(self.exponents[-1])

    def to_dict(self) -> dict:
        return {"exponents": [float(e) for e in self.exponents], "n_steps": self.n_steps,
                "n_transient": self.n_transient, "tail_delta": self.tail_delta,
                "neg_inf": self.neg_inf}


def default_transient(n_steps: int) -> int:
    return max(100, n_steps // 10)


def _state_dim(fmap) -> int:
    return int(fmap.state_dim)


def _action_dim(fmap) -> int:
    return int(getattr(fmap, "action_dim", 0))


def orbit(fmap, x0, actions, total: int) -> np.ndarray:
    """States x_0..x_total of ``fmap``; raises on leaving the finite range."""
    if hasattr(fmap, "orbit"):
        traj = fmap.orbit(x0, actions, total)
    else:
        traj = np.empty((total + 1, _state_dim(fmap)))
        x = np.asarray(x0, dtype=float)
        traj[0] = x
        with np.errstate(over="ignore", invalid="ignore"):
            for t in range(total):
                x = fmap.step(x, actions[t] if actions is not None else None)
                traj[t + 1] = x
                if not np.all(np.isfinite(x)) or np.max(np.abs(x)) > 1e150:
                    raise LyapunovOverflowError(t + 1)
    bad = ~np.all(np.isfinite(traj), axis=1) | (np.max(np.abs(traj), axis=1) > 1e150)
    if bad.any():
        raise LyapunovOverflowError(int(np.argmax(bad)))
    return traj


def jacobians(fmap, states: np.ndarray, actions) -> np.ndarray:
    """Jacobians along a batch of states, evaluated in chunks."""
    out = []
    for s in range(0, len(states), JAC_CHUNK):
        mu = actions[s:s + JAC_CHUNK] if actions is not None else None
        out.append(np.asarray(fmap.jacobian(states[s:s + JAC_CHUNK], mu)).reshape(
            -1, states.shape[1], states.shape[1]))
    return np.concatenate(out)


def _check_actions(fmap, actions, total):
    if _action_dim(fmap) == 0:
        return None
    if actions is None:
        raise ValueError("map takes actions but none were given")
    actions = np.asarray(actions, dtype=float)
    if len(actions) < total:
        raise ValueError(f"need {total} actions (transient + steps), got {len(actions)}")
    return actions[:total]


def estimate_spectrum(fmap, x0, actions=None, n_steps: int = 10_000,
                      n_transient: Optional[int] = None) -> LyapunovSpectrum:
    """Benettin estimate: push an orthonormal frame through the Jacobians and
    re-orthonormalize with QR at every step, averaging log |diag R| after the
    transient."""
    if n_steps < 100:
        raise ValueError("n_steps must be at least 100")
    if n_transient is None:
        n_transient = default_transient(n_steps)
    total = n_transient + n_steps
    actions = _check_actions(fmap, actions, total)
    traj = orbit(fmap, x0, actions, total)
    jac = jacobians(fmap, traj[:-1], actions)
    n = jac.shape[1]

    if n == 1:
        # a 1x1 frame only changes sign; R is |J|
        with np.errstate(divide="ignore"):
            logs = np.log(np.abs(jac[n_transient:, 0, :]))
    else:
        q = np.eye(n)
        logs = np.empty((n_steps, n))
        with np.errstate(divide="ignore"):
            for t in range(total):
                q, r = qr_decompose(jac[t] @ q)
                if t >= n_transient:
                    logs[t - n_transient] = np.log(np.diag(r))
    neg_inf = bool(np.isneginf(logs).any())
    sums = logs.sum(axis=0)
    exps = sums / n_steps
    tail = logs[-(n_steps // 4):].sum(axis=0) / (n_steps // 4)
    order = np.argsort(-exps, kind="stable")
    tail_delta = float(abs(tail[order[0]] - exps[order[0]])) if not neg_inf else float("nan")
    return LyapunovSpectrum(exps[order], n_steps, n_transient, tail_delta, neg_inf)


def _input_points(data, with_actions: bool) -> np.ndarray:
    return np.hstack([data.x, data.mu]) if with_actions and data.mu.shape[1] else data.x


def estimate_covering_radius(data, region, n_probes: int = 100_000, seed: int = 0) -> float:
    """Monte-Carlo covering radius: max over uniform probes in ``region`` of the
    distance to the nearest dataset input.  Inputs are (x, mu) jointly when the
    region spans both."""
    if len(data) == 0:
        raise ValueError("empty dataset")
    low, high = (np.atleast_1d(np.asarray(v, dtype=float)) for v in region)
    pts = _input_points(data, low.size > data.x.shape[1])
    if pts.shape[1] != low.size:
        raise ValueError("region dimension does not match dataset inputs")
    probes = np.random.default_rng(seed).uniform(low, high, size=(n_probes, low.size))
    dist, _ = cKDTree(pts).query(probes)
    return float(dist.max())


def estimate_epsilon(model, data) -> float:
    """Largest one-step prediction error of ``model`` over the dataset (Euclidean)."""
    if getattr(model, "training", False):
        raise ValueError("model must be in eval mode")
    if len(data) == 0:
        return 0.0
    pred = model.step(data.x, data.mu if _action_dim(model) else None)
    return float(np.max(np.linalg.norm(pred - data.xp, axis=1)))


def estimate_c(model, truth, region, n_pairs: int = 10_000, seed: int = 0,
               action_region=None) -> float:
    """Empirical gradient-variation constant.

    For sampled pairs (a, b) and random unit directions u, takes the largest
    ``|(row_k J(a) - row_k J(b)) . u| / |a - b|`` over rows of both the model
    and the true Jacobians.  Draws are row-ordered so a larger ``n_pairs``
    extends the same sample.
    """
    if n_pairs < 1:
        raise ValueError("n_pairs must be at least 1")
    low, high = (np.atleast_1d(np.asarray(v, dtype=float)) for v in region)
    n = low.size
    a_dim = _action_dim(truth)
    raw = np.random.default_rng(seed).uniform(size=(n_pairs, 3 * n + a_dim))
    a = low + (high - low) * raw[:, :n]
    b = low + (high - low) * raw[:, n:2 * n]
    u = np.random.default_rng([seed, 1]).normal(size=(n_pairs, n))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    mu = None
    if a_dim:
        alow, ahigh = action_region if action_region is not None else (-np.ones(a_dim), np.ones(a_dim))
        mu = alow + (np.asarray(ahigh) - np.asarray(alow)) * raw[:, 3 * n:]
    dist = np.linalg.norm(a - b, axis=1)
    keep = dist > 0
    best = 0.0
    for fmap in (model, truth):
        ja = jacobians(fmap, a, mu)
        jb = jacobians(fmap, b, mu)
        d = np.abs(np.einsum("pij,pj->pi", ja - jb, u)).max(axis=1)
        best = max(best, float(np.max(d[keep] / dist[keep])) if keep.any() else 0.0)
    return best


def bound_b(r: float, eps: float, c: float) -> float:
    """Jacobian deviation term ``4 sqrt(6 r^2 c^2 + eps c) + 10 r c``."""
    return 4.0 * math.sqrt(6.0 * r * r * c * c + eps * c) + 10.0 * r * c


@dataclass
class BoundConfig:
    n_probes: int = 100_000
    n_pairs: int = 10_000
    seed: int = 0
    n_transient: Optional[int] = None
    region: Optional[tuple] = None  # state box; defaults to the truth's box
    action_region: Optional[tuple] = None
    cond_limit: float = COND_LIMIT
    proxy: bool = False


@dataclass
class BoundReport:
    r: float
    eps: float
    c: float
    b: float
    N: int
    mean_log_term: float
    lambda_true: float
    bound_value: float
    lambda_true_min: float
    approx_bound: float
    probes_used: dict = field(default_factory=dict)
    lambda_model: Optional[float] = None
    monte_carlo_r: bool = True
    empirical_c: bool = True
    proxy: bool = False

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BoundReport":
        return cls(**d)


def inverse_norms(jac: np.ndarray, cond_limit: float = COND_LIMIT, offset: int = 0) -> np.ndarray:
    """Spectral norms of J_i^-1, rejecting numerically singular J_i."""
    out = np.empty(len(jac))
    for i, j in enumerate(jac):
        if j.shape == (1, 1):
            s = abs(j[0, 0])
            cond = 1.0 if s > 0 else math.inf
            inv = 1.0 / s if s > 0 else math.inf
            if s < 1.0 / cond_limit:
                cond = math.inf
        else:
            smax = spectral_norm(j)
            try:
                inv = spectral_norm(np.linalg.inv(j))
            except np.linalg.LinAlgError:
                inv = math.inf
            cond = smax * inv
        if not math.isfinite(cond) or cond > cond_limit:
            raise SingularJacobianError(offset + i, cond)
        out[i] = inv
    return out


def theorem1_bound(model, truth, data, x0, actions=None, n_steps: int = 10_000,
                   cfg: Optional[BoundConfig] = None) -> BoundReport:
    """Upper bound on the model's maximal exponent from r, eps, c and the true
    trajectory's inverse Jacobian norms.

    ``truth`` may be the source model itself when the real system is unknown
    (set ``cfg.proxy``).  Also reports the cruder variant that replaces
    ``|J_i^-1|`` by ``exp(-lambda_min)``.
    """
    cfg = cfg or BoundConfig()
    region = cfg.region or (truth.low, truth.high)
    n = _state_dim(truth)
    a_dim = _action_dim(truth)
    cover_region = region
    if a_dim:
        alow, ahigh = cfg.action_region or (-np.ones(a_dim), np.ones(a_dim))
        cover_region = (np.concatenate([region[0], alow]), np.concatenate([region[1], ahigh]))
    r = estimate_covering_radius(data, cover_region, cfg.n_probes, cfg.seed)
    eps = estimate_epsilon(model, data)
    c = estimate_c(model, truth, region, cfg.n_pairs, cfg.seed, cfg.action_region)
    b = bound_b(r, eps, c)

    n_transient = default_transient(n_steps) if cfg.n_transient is None else cfg.n_transient
    total = n_transient + n_steps
    acts = _check_actions(truth, actions, total)
    spec_true = estimate_spectrum(truth, x0, acts, n_steps, n_transient)
    traj = orbit(truth, x0, acts, total)
    jac = jacobians(truth, traj[n_transient:-1], acts[n_transient:] if acts is not None else None)
    inv = inverse_norms(jac, cfg.cond_limit, offset=n_transient)
    mean_log = float(np.mean(np.log1p(b * n * inv)))
    lam = spec_true.max
    lam_min = spec_true.min
    approx = lam + math.log1p(b * n * math.exp(-lam_min)) if math.isfinite(lam_min) else math.inf

    lam_model = None
    try:
        lam_model = estimate_spectrum(model, x0, acts, n_steps, n_transient).max
    except LyapunovOverflowError:
        lam_model = math.inf
    return BoundReport(r=r, eps=eps, c=c, b=b, N=n, mean_log_term=mean_log, lambda_true=lam,
                       bound_value=lam + mean_log, lambda_true_min=lam_min, approx_bound=approx,
                       probes_used={"covering": cfg.n_probes, "c_pairs": cfg.n_pairs,
                                    "trajectory_steps": n_steps},
                       lambda_model=lam_model, proxy=cfg.proxy)


class CoupledResidualMap:
    """The map (x, y) -> (f_S(x, mu), g(x, mu) + gamma y) with block-triangular Jacobian."""

    def __init__(self, source, residual, gamma: float):
        if not 0.0 < gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if getattr(residual, "extra_dim", 0):
            raise ValueError("coupled map needs a residual network without extra inputs")
        self.source = source
        self.residual = residual
        self.gamma = float(gamma)
        self.n = _state_dim(source)
        self.state_dim = 2 * self.n
        self.action_dim = _action_dim(source)

    def step(self, z, mu=None):
        z = np.asarray(z, dtype=float)
        x, y = z[..., :self.n], z[..., self.n:]
        return np.concatenate([self.source.step(x, mu), self.residual.forward(x, mu) + self.gamma * y], axis=-1)

    def jacobian(self, z, mu=None):
        z = np.atleast_2d(np.asarray(z, dtype=float))
        x = z[:, :self.n]
        n = self.n
        jac = np.zeros((len(z), 2 * n, 2 * n))
        jac[:, :n, :n] = np.asarray(self.source.jacobian(x, mu)).reshape(-1, n, n)
        jac[:, n:, :n] = np.asarray(self.residual.state_jacobian(x, mu)).reshape(-1, n, n)
        jac[:, n:, n:] = self.gamma * np.eye(n)
        return jac


def composite_spectrum(source, residual, gamma: float, x0, actions=None, n_steps: int = 10_000,
                       n_transient: Optional[int] = None) -> LyapunovSpectrum:
    """Spectrum of the cumulative-residual predictor viewed as a 2N-dimensional map."""
    cmap = CoupledResidualMap(source, residual, gamma)
    z0 = np.concatenate([np.asarray(x0, dtype=float), np.zeros(cmap.n)])
    return estimate_spectrum(cmap, z0, actions, n_steps, n_transient)
