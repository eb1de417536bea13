"""Residual feedforward transition model written directly in numpy.

The model predicts ``x' = x + h(x, mu)`` where ``h`` is a two hidden layer
network (SELU + alpha dropout, tanh + dropout, linear output).  Gradients are
computed by hand so that rollouts can be differentiated end to end and state
Jacobians are exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np

FORMAT_VERSION = 1

SELU_ALPHA = 1.6732632423543772
SELU_SCALE = 1.0507009873554805
# value a SELU unit is pushed to by alpha dropout
ALPHA_PRIME = -SELU_SCALE * SELU_ALPHA

PARAM_NAMES = ("w1", "b1", "w2", "b2", "w3", "b3")


class ModeError(RuntimeError):
    """Operation not defined in the model's current train/eval mode."""


class CheckpointError(ValueError):
    pass


def selu(a):
    return SELU_SCALE * np.where(a > 0, a, SELU_ALPHA * np.expm1(np.minimum(a, 0.0)))


def selu_grad(a):
    return SELU_SCALE * np.where(a > 0, 1.0, SELU_ALPHA * np.exp(np.minimum(a, 0.0)))


def _alpha_dropout_affine(p: float) -> tuple[float, float]:
    # keeps zero mean / unit variance of SELU activations under masking
    a = ((1.0 - p) * (1.0 + p * ALPHA_PRIME**2)) ** -0.5
    b = -a * ALPHA_PRIME * p
    return a, b


class Mlp:
    """Two hidden layer transition network.

    With ``residual=True`` the output is ``x + h(x, mu)``; otherwise it is
    ``h`` alone (used for residual correction networks).  ``extra_dim`` adds
    inputs after the action, e.g. the adjusted state of the recurrent residual
    variant.
    """

    def __init__(self, state_dim: int, action_dim: int = 0, hidden: int = 128,
                 dropout=(0.1, 0.1), seed: int = 0, residual: bool = True,
                 extra_dim: int = 0):
        if state_dim < 1 or action_dim < 0 or hidden < 1 or extra_dim < 0:
            raise ValueError("bad layer sizes")
        self.state_dim = int(state_dim)
        self.action_dim = int(action_dim)
        self.extra_dim = int(extra_dim)
        self.hidden = int(hidden)
        self.dropout = (float(dropout[0]), float(dropout[1]))
        self.residual = bool(residual)
        self.rng_seed = int(seed)
        self.rng = np.random.default_rng(self.rng_seed)
        self.training = False
        self.training_meta: dict[str, Any] = {}

        n_in = self.in_dim
        init = np.random.default_rng([self.rng_seed, 7919])
        # LeCun normal for SELU, Xavier normal for the tanh and output layers
        self.params = {
            "w1": init.normal(0.0, np.sqrt(1.0 / n_in), (hidden, n_in)),
            "b1": np.zeros(hidden),
            "w2": init.normal(0.0, np.sqrt(2.0 / (2 * hidden)), (hidden, hidden)),
            "b2": np.zeros(hidden),
            "w3": init.normal(0.0, np.sqrt(2.0 / (hidden + state_dim)), (state_dim, hidden)),
            "b3": np.zeros(state_dim),
        }
        self.in_mean = np.zeros(n_in)
        self.in_std = np.ones(n_in)
        self.out_std = np.ones(state_dim)

    @property
    def in_dim(self) -> int:
        return self.state_dim + self.action_dim + self.extra_dim

    def train(self) -> "Mlp":
        self.training = True
        return self

    def eval(self) -> "Mlp":
        self.training = False
        return self

    def copy(self, seed: Optional[int] = None) -> "Mlp":
        """Deep copy; the dropout RNG restarts from ``seed`` (default: the original seed)."""
        other = Mlp.from_dict(self.to_dict())
        if seed is not None:
            other.rng_seed = int(seed)
            other.rng = np.random.default_rng(other.rng_seed)
        other.training = self.training
        return other

    def zero_output(self) -> "Mlp":
        self.params["w3"][:] = 0.0
        self.params["b3"][:] = 0.0
        return self

    def fit_normalization(self, x, mu=None, target=None, extra=None) -> "Mlp":
        """Standardize inputs and scale outputs using a dataset.

        ``target`` is the quantity ``h`` should produce (the state increment for
        residual models).
        """
        z = self._inputs(x, mu, extra)
        self.in_mean = z.mean(axis=0)
        std = z.std(axis=0)
        self.in_std = np.where(std > 1e-8, std, 1.0)
        if target is not None:
            ostd = np.asarray(target, dtype=float).reshape(-1, self.state_dim).std(axis=0)
            self.out_std = np.where(ostd > 1e-12, ostd, 1.0)
        return self

    @property
    def loss_weights(self) -> np.ndarray:
        """Per-coordinate weights turning squared state error into output-normalized units."""
        return 1.0 / self.out_std**2

    # -- forward / backward -------------------------------------------------

    def _inputs(self, x, mu, extra) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[-1] != self.state_dim:
            raise ValueError(f"state has dimension {x.shape[-1]}, model expects {self.state_dim}")
        parts = [x]
        if self.action_dim:
            if mu is None:
                raise ValueError("model expects an action input")
            mu = np.atleast_2d(np.asarray(mu, dtype=float))
            if mu.shape[-1] != self.action_dim:
                raise ValueError(f"action has dimension {mu.shape[-1]}, model expects {self.action_dim}")
            parts.append(np.broadcast_to(mu, (x.shape[0], self.action_dim)))
        elif mu is not None and np.size(mu) > 0:
            raise ValueError("model takes no action input")
        if self.extra_dim:
            if extra is None:
                raise ValueError("model expects an extra input")
            extra = np.atleast_2d(np.asarray(extra, dtype=float))
            if extra.shape[-1] != self.extra_dim:
                raise ValueError("extra input has wrong dimension")
            parts.append(np.broadcast_to(extra, (x.shape[0], self.extra_dim)))
        return np.concatenate(parts, axis=1) if len(parts) > 1 else x

    def _forward(self, z: np.ndarray, train: bool) -> tuple[np.ndarray, dict]:
        p = self.params
        zn = (z - self.in_mean) / self.in_std
        a1 = zn @ p["w1"].T + p["b1"]
        s1 = selu(a1)
        cache = {"zn": zn, "a1": a1}
        p1, p2 = self.dropout
        if train and p1 > 0:
            m1 = (self.rng.random(a1.shape) >= p1).astype(float)
            ka, kb = _alpha_dropout_affine(p1)
            d1 = ka * (s1 * m1 + ALPHA_PRIME * (1.0 - m1)) + kb
            cache["g1"] = ka * m1
        else:
            d1 = s1
            cache["g1"] = None
        a2 = d1 @ p["w2"].T + p["b2"]
        t2 = np.tanh(a2)
        if train and p2 > 0:
            m2 = (self.rng.random(a2.shape) >= p2) / (1.0 - p2)
            d2 = t2 * m2
            cache["g2"] = m2
        else:
            d2 = t2
            cache["g2"] = None
        o = d2 @ p["w3"].T + p["b3"]
        cache.update(d1=d1, t2=t2, d2=d2)
        return o * self.out_std, cache

    def _backward(self, cache: dict, grad_h: np.ndarray) -> tuple[dict, np.ndarray]:
        """Parameter gradients and input gradient given dL/dh (batch, state_dim)."""
        p = self.params
        do = grad_h * self.out_std
        grads = {"w3": do.T @ cache["d2"], "b3": do.sum(axis=0)}
        dd2 = do @ p["w3"]
        if cache["g2"] is not None:
            dd2 = dd2 * cache["g2"]
        da2 = dd2 * (1.0 - cache["t2"] ** 2)
        grads["w2"] = da2.T @ cache["d1"]
        grads["b2"] = da2.sum(axis=0)
        dd1 = da2 @ p["w2"]
        if cache["g1"] is not None:
            dd1 = dd1 * cache["g1"]
        da1 = dd1 * selu_grad(cache["a1"])
        grads["w1"] = da1.T @ cache["zn"]
        grads["b1"] = da1.sum(axis=0)
        dz = (da1 @ p["w1"]) / self.in_std
        return grads, dz

    def delta(self, x, mu=None, extra=None) -> np.ndarray:
        """The network term ``h`` alone."""
        squeeze = np.ndim(x) == 1
        h, _ = self._forward(self._inputs(x, mu, extra), self.training)
        return h[0] if squeeze else h

    def forward(self, x, mu=None, extra=None) -> np.ndarray:
        squeeze = np.ndim(x) == 1
        h, _ = self._forward(self._inputs(x, mu, extra), self.training)
        out = np.atleast_2d(np.asarray(x, dtype=float)) + h if self.residual else h
        return out[0] if squeeze else out

    __call__ = forward

    def state_jacobian(self, x, mu=None, extra=None) -> np.ndarray:
        """Exact d forward / d x.  Accepts a single state or a batch."""
        if self.training:
            raise ModeError("state_jacobian is only defined in eval mode")
        squeeze = np.ndim(x) == 1
        z = self._inputs(x, mu, extra)
        _, c = self._forward(z, train=False)
        p = self.params
        n = self.state_dim
        w1x = p["w1"][:, :n] / self.in_std[:n]
        # J = diag(out_std) W3 diag(tanh') W2 diag(selu') W1x
        inner = selu_grad(c["a1"])[:, :, None] * w1x[None, :, :]
        mid = np.einsum("hk,bkn->bhn", p["w2"], inner)
        mid *= (1.0 - c["t2"] ** 2)[:, :, None]
        jac = np.einsum("oh,bhn->bon", p["w3"], mid) * self.out_std[None, :, None]
        if self.residual:
            jac += np.eye(n)[None]
        return jac[0] if squeeze else jac

    # protocol shared with DynamicalSystem so analysis code accepts either
    def step(self, x, mu=None):
        return self.forward(x, mu)

    def jacobian(self, x, mu=None):
        return self.state_jacobian(x, mu)

    # -- persistence --------------------------------------------------------

    def to_dict(self) -> dict:
        layers = []
        for i in (1, 2, 3):
            w = self.params[f"w{i}"]
            layers.append({"rows": w.shape[0], "cols": w.shape[1],
                           "w": w.ravel().tolist(), "b": self.params[f"b{i}"].tolist()})
        return {
            "format_version": FORMAT_VERSION,
            "state_dim": self.state_dim,
            "action_dim": self.action_dim,
            "extra_dim": self.extra_dim,
            "hidden": self.hidden,
            "residual": self.residual,
            "activations": ["selu", "tanh", "linear"],
            "dropout_rates": list(self.dropout),
            "normalization": {"mean": self.in_mean.tolist(), "std": self.in_std.tolist(),
                              "out_std": self.out_std.tolist()},
            "layers": layers,
            "rng_seed": self.rng_seed,
            "training_meta": self.training_meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Mlp":
        required = ("format_version", "state_dim", "action_dim", "hidden", "activations",
                    "dropout_rates", "normalization", "layers", "rng_seed")
        for key in required:
            if key not in d:
                raise CheckpointError(f"checkpoint is missing field '{key}'")
        if d["format_version"] != FORMAT_VERSION:
            raise CheckpointError(f"unsupported format_version {d['format_version']}")
        if list(d["activations"]) != ["selu", "tanh", "linear"]:
            raise CheckpointError(f"unsupported activations {d['activations']}")
        m = cls(d["state_dim"], d["action_dim"], d["hidden"], tuple(d["dropout_rates"]),
                seed=d["rng_seed"], residual=d.get("residual", True),
                extra_dim=d.get("extra_dim", 0))
        norm = d["normalization"]
        for key in ("mean", "std"):
            if key not in norm:
                raise CheckpointError(f"checkpoint is missing field 'normalization.{key}'")
        m.in_mean = np.array(norm["mean"], dtype=float)
        m.in_std = np.array(norm["std"], dtype=float)
        m.out_std = np.array(norm.get("out_std", [1.0] * m.state_dim), dtype=float)
        if len(d["layers"]) != 3:
            raise CheckpointError("checkpoint must have exactly 3 layers")
        for i, layer in enumerate(d["layers"], start=1):
            for key in ("w", "b"):
                if key not in layer:
                    raise CheckpointError(f"checkpoint is missing field 'layers[{i - 1}].{key}'")
            shape = m.params[f"w{i}"].shape
            w = np.array(layer["w"], dtype=float)
            b = np.array(layer["b"], dtype=float)
            if w.size != shape[0] * shape[1] or b.size != shape[0]:
                raise CheckpointError(f"layer {i - 1} has wrong size")
            m.params[f"w{i}"] = w.reshape(shape)
            m.params[f"b{i}"] = b
        m.training_meta = dict(d.get("training_meta", {}))
        return m

    def save(self, path) -> None:
        from .io import atomic_write_text
        atomic_write_text(path, json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "Mlp":
        try:
            with open(path) as fh:
                d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"{path}: not a valid checkpoint ({exc})") from exc
        return cls.from_dict(d)


# -- optimization -------------------------------------------------------------

@dataclass
class OptimizerState:
    """Adam state; moment buffers are created lazily to match the model."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        for k, g in grads.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(params[k])
                self.v[k] = np.zeros_like(params[k])
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            mhat = self.m[k] / (1 - self.beta1**self.t)
            vhat = self.v[k] / (1 - self.beta2**self.t)
            params[k] -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


@dataclass
class TrainingLog:
    losses: list = field(default_factory=list)

    @property
    def final(self) -> float:
        return self.losses[-1] if self.losses else float("nan")


def train_pointwise(model: Mlp, data, opt: Optional[OptimizerState] = None, epochs: int = 10,
                    batch: int = 64, rng_seed: int = 0, target=None, extra=None) -> TrainingLog:
    """Minibatch training on one-step transitions.

    The loss is the squared error of ``forward(x, mu)`` against ``x'``, measured
    in output-normalized units.  ``target`` overrides the supervised output
    (used for residual correction networks, which predict ``target`` directly).
    """
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    opt = opt or OptimizerState()
    x, mu = data.x, data.mu if model.action_dim else None
    if target is None:
        target = data.xp - x if model.residual else data.xp
    target = np.asarray(target, dtype=float)
    z = model._inputs(x, mu, extra)
    scale = model.out_std
    n = len(z)
    order_rng = np.random.default_rng(rng_seed)
    log = TrainingLog()
    model.train()
    for _ in range(epochs):
        perm = order_rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch):
            idx = perm[start:start + batch]
            h, cache = model._forward(z[idx], train=True)
            err = (h - target[idx]) / scale
            total += float(np.sum(err**2))
            grad_h = 2.0 * err / scale / err.size
            grads, _ = model._backward(cache, grad_h)
            opt.step(model.params, grads)
        log.losses.append(total / (n * model.state_dim))
    model.eval()
    return log


def train_full_batch(model: Mlp, data, max_iter: int = 2000, target=None) -> TrainingLog:
    """Deterministic full-batch L-BFGS on the same loss as ``train_pointwise``.

    Dropout is ignored.  Useful for small low-dimensional problems where the
    model has to be fitted far more precisely than minibatch Adam manages.
    """
    from scipy.optimize import minimize

    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    x, mu = data.x, data.mu if model.action_dim else None
    if target is None:
        target = data.xp - x if model.residual else data.xp
    target = np.asarray(target, dtype=float)
    z = model._inputs(x, mu, None)
    scale = model.out_std
    shapes = [(k, model.params[k].shape) for k in PARAM_NAMES]

    def unpack(theta):
        i = 0
        for k, shape in shapes:
            size = int(np.prod(shape))
            model.params[k] = theta[i:i + size].reshape(shape).copy()
            i += size

    def loss_and_grad(theta):
        unpack(theta)
        h, cache = model._forward(z, train=False)
        err = (h - target) / scale
        grads, _ = model._backward(cache, 2.0 * err / scale / err.size)
        return float(np.mean(err**2)), np.concatenate([grads[k].ravel() for k, _ in shapes])

    theta0 = np.concatenate([model.params[k].ravel() for k, _ in shapes])
    res = minimize(loss_and_grad, theta0, jac=True, method="L-BFGS-B",
                   options={"maxiter": max_iter, "ftol": 0.0, "gtol": 0.0})
    unpack(res.x)
    model.eval()
    return TrainingLog([float(res.fun)])


def step_weights(n: int) -> np.ndarray:
    """Default per-step weights 1/i for steps i = 1..n."""
    return 1.0 / np.arange(1, n + 1)


def backprop_through_rollout(model: Mlp, x0, actions, targets, weights=None):
    """Weighted multi-step loss of an open-loop rollout and its exact gradients.

    ``x0`` is (N,) or (B, N); ``actions`` (n, A) or (B, n, A); ``targets``
    (n, N) or (B, n, N) hold the true states x*_1..x*_n.  The loss is
    ``sum_i w_i * MSE(x_i, x*_i)`` averaged over the batch, with the MSE taken in
    output-normalized units (identical to raw MSE for an unscaled model).
    Dropout follows the model's mode, with fresh masks at every step.
    """
    x0 = np.asarray(x0, dtype=float)
    batched = x0.ndim == 2
    targets = np.asarray(targets, dtype=float)
    if not batched:
        x0 = x0[None]
        targets = targets[None]
    n = targets.shape[1]
    if n == 0:
        raise ValueError("rollout horizon must be at least 1")
    if model.action_dim:
        actions = np.asarray(actions, dtype=float)
        if not batched:
            actions = actions[None]
        if actions.shape[1] != n:
            raise ValueError("actions and targets must have the same length")
    w = step_weights(n) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != (n,):
        raise ValueError("need one weight per step")
    if not model.residual:
        raise ValueError("rollouts need a residual transition model")

    bsz, sd = x0.shape
    lw = model.loss_weights
    caches = []
    x = x0
    loss = 0.0
    errs = []
    for i in range(n):
        mu = actions[:, i] if model.action_dim else None
        h, cache = model._forward(model._inputs(x, mu, None), model.training)
        caches.append(cache)
        x = x + h
        e = x - targets[:, i]
        errs.append(e)
        loss += w[i] * float(np.sum(e**2 * lw)) / (bsz * sd)

    grads = {k: np.zeros_like(v) for k, v in model.params.items()}
    gx = np.zeros_like(x0)
    for i in reversed(range(n)):
        gx = gx + w[i] * 2.0 * errs[i] * lw / (bsz * sd)
        g, dz = model._backward(caches[i], gx)
        for k in grads:
            grads[k] += g[k]
        gx = gx + dz[:, :sd]
    return loss, grads


def rollout(model: Mlp, x0, actions=None, n: Optional[int] = None) -> np.ndarray:
    """Chain one-step predictions. Returns states x_0..x_n, batched if x0 is."""
    x = np.asarray(x0, dtype=float)
    batched = x.ndim == 2
    if not batched:
        x = x[None]
    if model.action_dim:
        actions = np.asarray(actions, dtype=float)
        if not batched:
            actions = actions[None]
        n = actions.shape[1]
    elif n is None:
        n = 0 if actions is None else len(actions)
    out = np.empty((x.shape[0], n + 1, x.shape[1]))
    out[:, 0] = x
    for i in range(n):
        x = model.forward(x, actions[:, i] if model.action_dim else None)
        out[:, i + 1] = x
    return out if batched else out[0]
