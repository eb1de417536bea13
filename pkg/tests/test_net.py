import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lyaptransfer.net import (SELU_ALPHA, SELU_SCALE, CheckpointError, Mlp, ModeError, OptimizerState,
                              backprop_through_rollout, step_weights, train_pointwise)
from lyaptransfer.numerics import finite_diff_jacobian
from lyaptransfer.systems import TransitionDataset


def _dataset(x, mu, xp):
    x = np.asarray(x, float).reshape(len(x), -1)
    xp = np.asarray(xp, float).reshape(len(xp), -1)
    mu = np.zeros((len(x), 0)) if mu is None else np.asarray(mu, float).reshape(len(x), -1)
    return TransitionDataset(x, mu, xp, np.zeros(len(x), dtype=int), np.arange(len(x)))


def _randomize(m, seed, scale=1.0):
    rng = np.random.default_rng(seed)
    for k, v in m.params.items():
        m.params[k] = scale * rng.normal(size=v.shape) / np.sqrt(v.shape[-1])
    m.in_mean = rng.normal(size=m.in_dim) * 0.1
    m.in_std = rng.uniform(0.5, 2.0, size=m.in_dim)
    m.out_std = rng.uniform(0.5, 2.0, size=m.state_dim)
    return m


def reference_forward(m, x, mu):
    """Unvectorized eval-mode forward pass, written independently of Mlp."""
    z = list(x) + list(mu)
    zn = [(z[i] - m.in_mean[i]) / m.in_std[i] for i in range(len(z))]
    w1, b1, w2, b2, w3, b3 = (m.params[k] for k in ("w1", "b1", "w2", "b2", "w3", "b3"))
    h1 = []
    for j in range(len(b1)):
        a = b1[j] + sum(w1[j, i] * zn[i] for i in range(len(zn)))
        h1.append(SELU_SCALE * a if a > 0 else SELU_SCALE * SELU_ALPHA * (math.exp(a) - 1))
    h2 = [math.tanh(b2[j] + sum(w2[j, i] * h1[i] for i in range(len(h1)))) for j in range(len(b2))]
    out = []
    for k in range(len(b3)):
        o = b3[k] + sum(w3[k, i] * h2[i] for i in range(len(h2)))
        out.append(x[k] + m.out_std[k] * o)
    return np.array(out)


def test_zero_weights_identity():
    m = Mlp(2, 0, hidden=8).zero_output()
    for k in m.params:
        m.params[k][:] = 0.0
    np.testing.assert_array_equal(m.forward(np.array([0.3, -0.1])), [0.3, -0.1])
    np.testing.assert_array_equal(m.state_jacobian(np.array([0.3, -0.1])), np.eye(2))


def test_single_unit_tanh_path():
    m = Mlp(1, 0, hidden=1, residual=False)
    m.params["w1"][:] = 1.0 / SELU_SCALE
    m.params["w2"][:] = 1.0
    m.params["w3"][:] = 1.0
    assert m.forward(np.array([0.0]))[0] == 0.0
    assert m.forward(np.array([0.5]))[0] == pytest.approx(math.tanh(0.5), abs=1e-15)


@pytest.mark.parametrize("seed", range(3))
def test_forward_matches_reference(seed):
    m = _randomize(Mlp(3, 2, hidden=10), seed)
    rng = np.random.default_rng(100 + seed)
    x, mu = rng.normal(size=3), rng.normal(size=2)
    np.testing.assert_allclose(m.forward(x, mu), reference_forward(m, x, mu), atol=1e-12, rtol=0)


def test_eval_mode_is_deterministic_train_mode_is_not():
    m = Mlp(2, 1, hidden=16, seed=3)
    x, mu = np.array([0.1, 0.2]), np.array([0.5])
    a, b = m.forward(x, mu), m.forward(x, mu)
    assert a.tobytes() == b.tobytes()
    m.train()
    outs = {m.forward(x, mu).tobytes() for _ in range(5)}
    assert len(outs) > 1


def test_dimension_mismatch():
    m = Mlp(2, 1, hidden=4)
    with pytest.raises(ValueError):
        m.forward(np.zeros(3), np.zeros(1))
    with pytest.raises(ValueError):
        m.forward(np.zeros(2), np.zeros(2))


def test_jacobian_in_train_mode_raises():
    m = Mlp(2, 0, hidden=4).train()
    with pytest.raises(ModeError):
        m.state_jacobian(np.zeros(2))


@pytest.mark.parametrize("seed", range(5))
def test_jacobian_matches_finite_differences(seed):
    m = _randomize(Mlp(3, 2, hidden=12), seed)
    rng = np.random.default_rng(seed)
    x, mu = rng.normal(size=3), rng.normal(size=2)
    jac = m.state_jacobian(x, mu)
    fd = finite_diff_jacobian(lambda v: m.forward(v, mu), x, 1e-5)
    rel = np.abs(jac - fd) / np.maximum(np.abs(fd), 1e-6)
    assert rel.max() < 1e-4


def test_jacobian_chain_rule_by_hand():
    # 2-unit net with tiny weights; all preactivations positive so SELU' = scale
    m = Mlp(1, 0, hidden=2)
    m.params["w1"] = np.array([[1e-3], [2e-3]])
    m.params["b1"] = np.array([1e-3, 1e-3])
    m.params["w2"] = np.array([[1e-3, -1e-3], [2e-3, 1e-3]])
    m.params["b2"] = np.zeros(2)
    m.params["w3"] = np.array([[0.5, -0.25]])
    x = np.array([0.7])
    a1 = m.params["w1"][:, 0] * 0.7 + 1e-3
    h1 = SELU_SCALE * a1
    a2 = m.params["w2"] @ h1
    d2 = np.diag(1 - np.tanh(a2) ** 2)
    d1 = np.diag([SELU_SCALE, SELU_SCALE])
    expected = 1.0 + (m.params["w3"] @ d2 @ m.params["w2"] @ d1 @ m.params["w1"])[0, 0]
    assert m.state_jacobian(x)[0, 0] == pytest.approx(expected, rel=1e-13)


def test_batched_jacobian_matches_single():
    m = _randomize(Mlp(2, 1, hidden=6), 9)
    xs = np.random.default_rng(0).normal(size=(4, 2))
    mus = np.random.default_rng(1).normal(size=(4, 1))
    batch = m.state_jacobian(xs, mus)
    for i in range(4):
        np.testing.assert_allclose(batch[i], m.state_jacobian(xs[i], mus[i]), atol=1e-14)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-1.0, 1.0), st.floats(-1.0, 1.0))
def test_residual_identity_property(seed, a, b):
    m = _randomize(Mlp(2, 1, hidden=8), seed).zero_output()
    x = np.array([a, b])
    np.testing.assert_array_equal(m.forward(x, [0.3]), x)
    np.testing.assert_array_equal(m.state_jacobian(x, [0.3]), np.eye(2))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.lists(st.floats(-1.0, 1.0), min_size=3, max_size=3))
def test_prediction_saturates(seed, v):
    m = _randomize(Mlp(2, 1, hidden=8), seed, scale=3.0)
    bound = m.out_std * (np.abs(m.params["w3"]).sum(axis=1) + np.abs(m.params["b3"]))
    x, mu = 1000.0 * np.array(v[:2]), 1000.0 * np.array(v[2:])
    h = m.forward(x, mu) - x
    assert np.all(np.abs(h) <= bound * (1 + 1e-12))


def test_train_identity_data_zero_model_stays_exact():
    m = Mlp(1, 0, hidden=8)
    for k in m.params:
        m.params[k][:] = 0.0
    x = np.linspace(-1, 1, 50)
    log = train_pointwise(m, _dataset(x, None, x), epochs=50, batch=10)
    assert log.final < 1e-8


def _affine_data(n=1000, seed=0):
    x = np.random.default_rng(seed).uniform(-1, 1, size=n)
    return _dataset(x, None, 0.9 * x + 0.1)


def test_train_affine_system():
    data = _affine_data()
    # dropout noise alone keeps the eval error near 1e-4, so it is off here
    m = Mlp(1, 0, hidden=32, dropout=(0.0, 0.0), seed=1)
    m.fit_normalization(data.x, None, data.xp - data.x)
    log = train_pointwise(m, data, OptimizerState(lr=1e-3), epochs=100, batch=32, rng_seed=2)
    m.eval()
    mse = float(np.mean((m.forward(data.x) - data.xp) ** 2))
    assert mse < 1e-5
    # smoothed loss curve decreases window to window
    win = np.array(log.losses).reshape(-1, 10).mean(axis=1)
    assert np.all(np.diff(win) <= 0)


def test_training_is_deterministic():
    data = _affine_data(200)
    outs = []
    for _ in range(2):
        m = Mlp(1, 0, hidden=16, seed=4)
        m.fit_normalization(data.x, None, data.xp - data.x)
        train_pointwise(m, data, epochs=3, batch=16, rng_seed=5)
        outs.append(b"".join(v.tobytes() for v in m.params.values()))
    assert outs[0] == outs[1]


def test_train_empty_dataset():
    with pytest.raises(ValueError):
        train_pointwise(Mlp(1, 0, hidden=4), _dataset(np.zeros(0), None, np.zeros(0)))


def test_rollout_loss_zero_for_exact_model():
    m = Mlp(2, 1, hidden=8).zero_output()
    x0 = np.array([0.4, -0.2])
    loss, grads = backprop_through_rollout(m, x0, np.ones((4, 1)), np.tile(x0, (4, 1)))
    assert loss == 0.0
    assert all(not np.any(g) for g in grads.values())


def test_rollout_loss_weights():
    # identity model from 0; targets 1, 2, 3 give squared errors 1, 4, 9
    m = Mlp(1, 0, hidden=4).zero_output()
    loss, _ = backprop_through_rollout(m, np.zeros(1), None, np.array([[1.0], [2.0], [3.0]]))
    assert loss == 1.0 / 1 + 4.0 / 2 + 9.0 / 3
    np.testing.assert_array_equal(step_weights(3), [1.0, 0.5, 1.0 / 3])


def test_rollout_rejects_empty_horizon():
    with pytest.raises(ValueError):
        backprop_through_rollout(Mlp(1, 0, hidden=4), np.zeros(1), None, np.zeros((0, 1)))


def rollout_loss(m, x0, targets, weights):
    """Loss of a rollout evaluated by plain iteration (finite-difference oracle side)."""
    x, total = x0.copy(), 0.0
    for i, t in enumerate(targets):
        x = m.forward(x)
        total += weights[i] * float(np.mean((x - t) ** 2 * m.loss_weights))
    return total


def test_rollout_gradient_matches_finite_differences():
    m = _randomize(Mlp(1, 0, hidden=6), 0, scale=1.5)
    x0 = np.array([0.3])
    targets = np.array([[0.5], [0.2], [-0.1], [0.4], [0.0]])
    w = step_weights(5)
    loss, grads = backprop_through_rollout(m, x0, None, targets)
    assert loss == pytest.approx(rollout_loss(m, x0, targets, w), rel=1e-12)
    h = 1e-6
    for k, p in m.params.items():
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            lp = rollout_loss(m, x0, targets, w)
            p[idx] = old - h
            lm = rollout_loss(m, x0, targets, w)
            p[idx] = old
            fd = (lp - lm) / (2 * h)
            g = grads[k][idx]
            assert abs(g - fd) / max(abs(g), abs(fd), 1e-6) < 1e-3, (k, idx, g, fd)


def test_checkpoint_round_trip(tmp_path):
    m = _randomize(Mlp(3, 2, hidden=5, seed=8), 1)
    m.training_meta = {"epochs": 3}
    p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
    m.save(p1)
    m2 = Mlp.load(p1)
    m2.save(p2)
    m3 = Mlp.load(p2)
    assert p1.read_bytes() == p2.read_bytes()
    for k in m.params:
        np.testing.assert_array_equal(m.params[k], m3.params[k])
    np.testing.assert_array_equal(m.in_std, m3.in_std)
    x, mu = np.ones(3), np.ones(2)
    assert m.forward(x, mu).tobytes() == m3.forward(x, mu).tobytes()


@pytest.mark.parametrize("missing", ["layers", "normalization", "state_dim", "rng_seed"])
def test_checkpoint_missing_field(tmp_path, missing):
    d = Mlp(2, 1, hidden=3).to_dict()
    del d[missing]
    p = tmp_path / "bad.json"
    p.write_text(json.dumps(d))
    with pytest.raises(CheckpointError, match=missing):
        Mlp.load(p)


def test_checkpoint_truncated_file(tmp_path):
    p = tmp_path / "ck.json"
    Mlp(2, 1, hidden=3).save(p)
    p.write_text(p.read_text()[:50])
    with pytest.raises(CheckpointError):
        Mlp.load(p)
