"""Synthetic ground-truth systems, random-policy data generation and datasets."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .io import atomic_write_text, fmt


class DynamicalSystem:
    """Deterministic controlled map ``x' = step(x, mu)`` with an analytic Jacobian.

    ``params`` holds the perturbable parameters (floats or arrays);
    ``settings`` holds structural choices such as the time step or seeds.
    Subclasses implement ``_step`` and ``_jacobian`` on batches.
    """

    name = "base"
    state_dim = 1
    action_dim = 0

    def __init__(self, params: dict, settings: Optional[dict] = None, low=None, high=None):
        self.params = {k: (np.array(v, dtype=float) if np.ndim(v) else float(v)) for k, v in params.items()}
        self.settings = dict(settings or {})
        self.low = np.asarray(low, dtype=float)
        self.high = np.asarray(high, dtype=float)

    def __repr__(self):
        return f"{type(self).__name__}({self.params_summary()})"

    def params_summary(self) -> str:
        return ", ".join(f"{k}={v}" for k, v in self.params.items() if np.ndim(v) == 0)

    def _prep(self, x, mu):
        x = np.asarray(x, dtype=float)
        squeeze = x.ndim == 1
        x = np.atleast_2d(x)
        if x.shape[-1] != self.state_dim:
            raise ValueError(f"{self.name}: state has dimension {x.shape[-1]}, expected {self.state_dim}")
        if self.action_dim:
            if mu is None:
                raise ValueError(f"{self.name}: action required")
            mu = np.atleast_2d(np.asarray(mu, dtype=float))
            if mu.shape[-1] != self.action_dim:
                raise ValueError(f"{self.name}: action has dimension {mu.shape[-1]}, expected {self.action_dim}")
            mu = np.broadcast_to(mu, (x.shape[0], self.action_dim))
        return x, mu, squeeze

    def step(self, x, mu=None) -> np.ndarray:
        x, mu, squeeze = self._prep(x, mu)
        out = self._step(x, mu)
        return out[0] if squeeze else out

    def jacobian(self, x, mu=None) -> np.ndarray:
        x, mu, squeeze = self._prep(x, mu)
        out = self._jacobian(x, mu)
        return out[0] if squeeze else out

    def inside(self, x) -> np.ndarray:
        x = np.atleast_2d(x)
        return np.all((x >= self.low) & (x <= self.high), axis=-1) & np.all(np.isfinite(x), axis=-1)

    def to_meta(self) -> dict:
        return {
            "name": self.name,
            "params": {k: (v.tolist() if np.ndim(v) else v) for k, v in self.params.items()},
            "settings": self.settings,
        }

    def _step(self, x, mu):
        raise NotImplementedError

    def _jacobian(self, x, mu):
        raise NotImplementedError


class LogisticMap(DynamicalSystem):
    name = "logistic"
    state_dim = 1
    action_dim = 0
    defaults = {"rho": 4.0}

    def __init__(self, params=None, settings=None):
        super().__init__({**self.defaults, **(params or {})}, settings, low=[0.0], high=[1.0])

    def _step(self, x, mu):
        rho = self.params["rho"]
        return rho * x * (1.0 - x)

    def _jacobian(self, x, mu):
        rho = self.params["rho"]
        return (rho * (1.0 - 2.0 * x))[:, :, None]

    def orbit(self, x0, actions, total):
        # scalar loop: long orbits are the common case for this map
        rho = self.params["rho"]
        out = [0.0] * (total + 1)
        x = out[0] = float(np.asarray(x0).ravel()[0])
        for t in range(1, total + 1):
            x = rho * x * (1.0 - x)
            out[t] = x
        return np.array(out)[:, None]


class HenonMap(DynamicalSystem):
    name = "henon"
    state_dim = 2
    action_dim = 0
    defaults = {"a": 1.4, "b": 0.3}

    def __init__(self, params=None, settings=None):
        super().__init__({**self.defaults, **(params or {})}, settings,
                         low=[-1.5, -0.5], high=[1.5, 0.5])

    def _step(self, x, mu):
        a, b = self.params["a"], self.params["b"]
        return np.stack([1.0 - a * x[:, 0] ** 2 + x[:, 1], b * x[:, 0]], axis=-1)

    def _jacobian(self, x, mu):
        a, b = self.params["a"], self.params["b"]
        jac = np.zeros((x.shape[0], 2, 2))
        jac[:, 0, 0] = -2.0 * a * x[:, 0]
        jac[:, 0, 1] = 1.0
        jac[:, 1, 0] = b
        return jac

    def orbit(self, x0, actions, total):
        a, b = self.params["a"], self.params["b"]
        x, y = (float(v) for v in np.asarray(x0).ravel())
        out = [(x, y)]
        for _ in range(total):
            x, y = 1.0 - a * x * x + y, b * x
            out.append((x, y))
        return np.array(out)


class Pendulum(DynamicalSystem):
    """Damped torque-driven pendulum, semi-implicit Euler. State (angle, velocity)."""

    name = "pendulum"
    state_dim = 2
    action_dim = 1
    defaults = {"gravity": 9.81, "length": 1.0, "damping": 0.5, "torque_gain": 2.0}

    def __init__(self, params=None, settings=None):
        settings = {"dt": 0.05, **(settings or {})}
        super().__init__({**self.defaults, **(params or {})}, settings,
                         low=[-np.pi, -8.0], high=[np.pi, 8.0])

    def _accel(self, x, mu):
        p = self.params
        return (-(p["gravity"] / p["length"]) * np.sin(x[:, 0]) - p["damping"] * x[:, 1]
                + p["torque_gain"] * mu[:, 0])

    def _step(self, x, mu):
        dt = self.settings["dt"]
        v = x[:, 1] + dt * self._accel(x, mu)
        return np.stack([x[:, 0] + dt * v, v], axis=-1)

    def _jacobian(self, x, mu):
        p, dt = self.params, self.settings["dt"]
        dv_dth = -dt * (p["gravity"] / p["length"]) * np.cos(x[:, 0])
        dv_dv = 1.0 - dt * p["damping"]
        jac = np.empty((x.shape[0], 2, 2))
        jac[:, 1, 0] = dv_dth
        jac[:, 1, 1] = dv_dv
        jac[:, 0, 0] = 1.0 + dt * dv_dth
        jac[:, 0, 1] = dt * dv_dv
        return jac


class HandSurrogate(DynamicalSystem):
    """Four-dimensional stand-in for an underactuated hand holding an object.

    State is (object x, object y, load 1, load 2); actions are two actuator
    commands in [-1, 1].  The increment is
    ``unit * tanh(W xn - wall * xn**3 + V mu)`` where ``xn`` is the state
    scaled to [-1, 1] over the workspace box, and increments smaller than
    ``deadband`` are zeroed (stick-slip).  The cubic wall term keeps the
    object inside the workspace.
    """

    name = "hand_surrogate"
    state_dim = 4
    action_dim = 2

    def __init__(self, params=None, settings=None):
        settings = {"coupling_seed": 0, "half_width": 0.1, "contraction": [0.3, 0.3, 1.0, 1.0],
                    "coupling": 0.4, "action_gain": 1.5, "wall": 6.0, **(settings or {})}
        params = dict(params or {})
        if "W" not in params or "V" not in params:
            rng = np.random.default_rng([int(settings["coupling_seed"]), 4242])
            w = -np.diag(np.broadcast_to(settings["contraction"], 4)) + settings["coupling"] * rng.normal(size=(4, 4))
            v = settings["action_gain"] * rng.normal(size=(4, 2))
            params.setdefault("W", w)
            params.setdefault("V", v)
        params.setdefault("unit", 2e-3)
        params.setdefault("deadband", 0.05 * float(params["unit"]))
        hw = settings["half_width"]
        super().__init__(params, settings, low=[-hw] * 4, high=[hw] * 4)

    def _pre(self, x, mu):
        xn = x / self.settings["half_width"]
        return xn @ self.params["W"].T - self.settings["wall"] * xn**3 + mu @ self.params["V"].T

    def _step(self, x, mu):
        delta = self.params["unit"] * np.tanh(self._pre(x, mu))
        delta[np.abs(delta) < self.params["deadband"]] = 0.0
        return x + delta

    def _jacobian(self, x, mu):
        unit = self.params["unit"]
        t = np.tanh(self._pre(x, mu))
        # smooth branch at the deadband edge; zero slope strictly inside
        live = np.abs(unit * t) >= self.params["deadband"]
        hw = self.settings["half_width"]
        gain = unit * (1.0 - t**2) * live / hw
        dpre = self.params["W"][None] - (3.0 * self.settings["wall"] * (x / hw) ** 2)[:, :, None] * np.eye(4)[None]
        return np.eye(4)[None] + gain[:, :, None] * dpre


SYSTEMS = {cls.name: cls for cls in (LogisticMap, HenonMap, Pendulum, HandSurrogate)}


def make_system(name: str, params: Optional[dict] = None, settings: Optional[dict] = None) -> DynamicalSystem:
    """Build a built-in system by name with optional parameter/setting overrides."""
    try:
        cls = SYSTEMS[name]
    except KeyError:
        raise ValueError(f"unknown system '{name}', expected one of {sorted(SYSTEMS)}") from None
    return cls(params, settings)


def perturb_system(sys: DynamicalSystem, perturbation: float, seed: int) -> DynamicalSystem:
    """Copy of ``sys`` with each parameter entry scaled by ``1 + perturbation * u``, u ~ U[-1, 1]."""
    if perturbation < 0:
        raise ValueError("perturbation must be nonnegative")
    rng = np.random.default_rng([int(seed), 1729])
    new = copy.deepcopy(sys)
    for k in sorted(new.params):
        v = new.params[k]
        u = rng.uniform(-1.0, 1.0, size=np.shape(v))
        new.params[k] = v * (1.0 + perturbation * u) if np.ndim(v) else float(v * (1.0 + perturbation * float(u)))
    return new


@dataclass
class PolicySpec:
    """Random policy: uniform actions in [low, high] * unit, each held for a random number of steps."""

    low: float = -1.0
    high: float = 1.0
    unit: float = 1.0
    hold_min: int = 1
    hold_max: int = 5

    def sample(self, rng: np.random.Generator, length: int, action_dim: int) -> np.ndarray:
        out = np.empty((length, action_dim))
        i = 0
        while i < length:
            hold = int(rng.integers(self.hold_min, self.hold_max + 1))
            out[i:i + hold] = self.unit * rng.uniform(self.low, self.high, size=action_dim)
            i += hold
        return out


@dataclass
class TransitionDataset:
    """Triples (x, mu, x') stored as aligned arrays, with trajectory bookkeeping."""

    x: np.ndarray
    mu: np.ndarray
    xp: np.ndarray
    traj_id: np.ndarray
    step: np.ndarray
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.x)

    @property
    def state_dim(self) -> int:
        return self.x.shape[1]

    @property
    def action_dim(self) -> int:
        return self.mu.shape[1]

    def trajectory_ids(self) -> np.ndarray:
        _, first = np.unique(self.traj_id, return_index=True)
        return self.traj_id[np.sort(first)]

    def trajectories(self) -> list[np.ndarray]:
        """Row-index arrays of each contiguous trajectory, in storage order."""
        if len(self) == 0:
            return []
        cuts = np.flatnonzero((np.diff(self.traj_id) != 0) | (np.diff(self.step) != 1)) + 1
        return np.split(np.arange(len(self)), cuts)

    def select(self, rows) -> "TransitionDataset":
        rows = np.asarray(rows, dtype=int)
        return TransitionDataset(self.x[rows], self.mu[rows], self.xp[rows], self.traj_id[rows],
                                 self.step[rows], dict(self.meta))

    def subset(self, traj_ids) -> "TransitionDataset":
        return self.select(np.flatnonzero(np.isin(self.traj_id, list(traj_ids))))

    @staticmethod
    def concat(parts: list["TransitionDataset"]) -> "TransitionDataset":
        return TransitionDataset(*(np.concatenate([getattr(p, k) for p in parts])
                                   for k in ("x", "mu", "xp", "traj_id", "step")),
                                 dict(parts[0].meta) if parts else {})

    # -- files --------------------------------------------------------------

    def header(self) -> list[str]:
        n, a = self.state_dim, self.action_dim
        return (["traj_id", "step"] + [f"x_{i}" for i in range(n)] + [f"mu_{i}" for i in range(a)]
                + [f"xp_{i}" for i in range(n)])

    def to_csv_text(self) -> str:
        lines = [",".join(self.header())]
        for t, s, x, mu, xp in zip(self.traj_id.tolist(), self.step.tolist(), self.x.tolist(),
                                   self.mu.tolist(), self.xp.tolist()):
            lines.append(",".join([str(t), str(s)] + [fmt(v) for v in x + mu + xp]))
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        path = Path(path)
        atomic_write_text(path, self.to_csv_text())
        atomic_write_text(meta_path(path), json.dumps(self.meta, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "TransitionDataset":
        path = Path(path)
        with open(path) as fh:
            header = fh.readline().strip().split(",")
        n = sum(h.startswith("x_") for h in header)
        a = sum(h.startswith("mu_") for h in header)
        if header[:2] != ["traj_id", "step"] or len(header) != 2 + 2 * n + a:
            raise ValueError(f"{path}: unexpected dataset header")
        arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        if arr.size == 0:
            arr = np.empty((0, len(header)))
        meta = {}
        mp = meta_path(path)
        if mp.exists():
            meta = json.loads(mp.read_text())
        return cls(arr[:, 2:2 + n], arr[:, 2 + n:2 + n + a], arr[:, 2 + n + a:],
                   arr[:, 0].astype(int), arr[:, 1].astype(int), meta)


def meta_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta.json")


def generate_dataset(sys: DynamicalSystem, policy: Optional[PolicySpec] = None, n_traj: int = 300,
                     traj_len: int = 1000, seed: int = 0, noise_std: float = 0.0,
                     first_traj_id: int = 0) -> TransitionDataset:
    """Random-policy rollouts from random interior start states.

    Trajectory k uses its own generator derived from (seed, k), so the result
    does not depend on how trajectories are batched.  A trajectory that leaves
    the state box is cut before the escaping transition and listed in
    ``meta['truncated']``.
    """
    if n_traj < 1 or traj_len < 1:
        raise ValueError("n_traj and traj_len must be at least 1")
    policy = policy or PolicySpec()
    n, a = sys.state_dim, sys.action_dim
    center = (sys.low + sys.high) / 2
    half = (sys.high - sys.low) / 2
    starts = np.empty((n_traj, n))
    acts = np.empty((n_traj, traj_len, a))
    for k in range(n_traj):
        rng = np.random.default_rng([int(seed), first_traj_id + k])
        starts[k] = center + 0.8 * half * rng.uniform(-1.0, 1.0, size=n)
        acts[k] = policy.sample(rng, traj_len, a)

    states = np.empty((n_traj, traj_len + 1, n))
    states[:, 0] = starts
    alive = np.ones(n_traj, dtype=bool)
    length = np.full(n_traj, traj_len)
    x = starts.copy()
    for t in range(traj_len):
        with np.errstate(over="ignore", invalid="ignore"):
            nxt = sys.step(x, acts[:, t] if a else None)
        ok = sys.inside(nxt)
        newly_dead = alive & ~ok
        length[newly_dead] = t
        alive &= ok
        x = np.where(alive[:, None], nxt, x)
        states[:, t + 1] = x

    obs = states
    if noise_std > 0:
        obs = states + np.stack([np.random.default_rng([int(seed), first_traj_id + k, 1]).normal(
            0.0, noise_std, size=states.shape[1:]) for k in range(n_traj)])

    rows_x, rows_mu, rows_xp, rows_id, rows_step = [], [], [], [], []
    for k in range(n_traj):
        L = int(length[k])
        rows_x.append(obs[k, :L])
        rows_xp.append(obs[k, 1:L + 1])
        rows_mu.append(acts[k, :L])
        rows_id.append(np.full(L, first_traj_id + k))
        rows_step.append(np.arange(L))
    truncated = [int(first_traj_id + k) for k in range(n_traj) if length[k] < traj_len]
    meta = {
        "system": sys.to_meta(),
        "seed": int(seed),
        "n_traj": int(n_traj),
        "traj_len": int(traj_len),
        "noise_std": float(noise_std),
        "policy": vars(policy).copy(),
        "truncated": truncated,
    }
    return TransitionDataset(np.concatenate(rows_x), np.concatenate(rows_mu), np.concatenate(rows_xp),
                             np.concatenate(rows_id).astype(int), np.concatenate(rows_step).astype(int), meta)


def rollout_true(sys: DynamicalSystem, x0, actions=None, n: Optional[int] = None) -> np.ndarray:
    """States x_0..x_n of the true system under an action sequence (or n autonomous steps)."""
    x = np.asarray(x0, dtype=float)
    batched = x.ndim == 2
    if not batched:
        x = x[None]
    if sys.action_dim:
        actions = np.asarray(actions, dtype=float)
        if not batched:
            actions = actions[None]
        n = actions.shape[1]
    elif n is None:
        n = 0 if actions is None else len(actions)
    out = np.empty((x.shape[0], n + 1, x.shape[1]))
    out[:, 0] = x
    for i in range(n):
        x = sys.step(x, actions[:, i] if sys.action_dim else None)
        out[:, i + 1] = x
    return out if batched else out[0]
