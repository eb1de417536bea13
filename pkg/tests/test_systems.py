import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lyaptransfer.numerics import finite_diff_jacobian
from lyaptransfer.systems import (PolicySpec, TransitionDataset, generate_dataset, make_system, perturb_system,
                                  rollout_true)


def test_logistic_substitution():
    sys_ = make_system("logistic")
    assert sys_.step(np.array([0.5]))[0] == 1.0
    assert sys_.jacobian(np.array([0.5]))[0, 0] == 0.0


def test_henon_substitution():
    np.testing.assert_array_equal(make_system("henon").step(np.array([0.0, 0.0])), [1.0, 0.0])


def test_unknown_system():
    with pytest.raises(ValueError, match="unknown system"):
        make_system("double_pendulum")


def _fd_rel_err(sys_, x, mu):
    ana = sys_.jacobian(x, mu)
    num = finite_diff_jacobian(lambda z: sys_.step(z, mu), x, 1e-7)
    return np.max(np.abs(ana - num)) / max(np.max(np.abs(ana)), 1e-12)


def test_hand_jacobian_matches_fd_away_from_deadband():
    sys_ = make_system("hand_surrogate")
    rng = np.random.default_rng(0)
    h = 1e-7
    checked = 0
    while checked < 100:
        x = rng.uniform(sys_.low, sys_.high) * 0.9
        mu = rng.uniform(-1, 1, size=2)
        # skip points within 10 h of a deadband edge (in pre-activation terms)
        t = np.tanh(sys_._pre(x[None], mu[None]))[0]
        edge = np.arctanh(sys_.params["deadband"] / sys_.params["unit"])
        pre = sys_._pre(x[None], mu[None])[0]
        gain = np.abs(sys_.params["W"]).sum(axis=1) / sys_.settings["half_width"]
        if np.any(np.abs(np.abs(pre) - edge) < 10 * h * gain) or np.all(np.abs(t) < edge):
            continue
        assert _fd_rel_err(sys_, x, mu) < 1e-5
        checked += 1


@pytest.mark.parametrize("name", ["logistic", "henon", "pendulum"])
def test_smooth_system_jacobians(name):
    sys_ = make_system(name)
    rng = np.random.default_rng(3)
    for _ in range(50):
        x = rng.uniform(sys_.low, sys_.high)
        mu = rng.uniform(-1, 1, size=sys_.action_dim) if sys_.action_dim else None
        assert _fd_rel_err(sys_, x, mu) < 1e-5


def test_hand_increment_bounded_by_unit():
    sys_ = make_system("hand_surrogate")
    rng = np.random.default_rng(1)
    x = rng.uniform(sys_.low, sys_.high, size=(1000, 4)) * 3  # well outside the box too
    mu = rng.uniform(-1, 1, size=(1000, 2))
    # (x + d) - x carries one rounding of size ulp(x) when tanh saturates
    slack = 2 * np.spacing(np.abs(x))
    assert np.all(np.abs(sys_.step(x, mu) - x) <= sys_.params["unit"] + slack)


def test_hand_deadband_zeroes_small_moves():
    sys_ = make_system("hand_surrogate")
    rng = np.random.default_rng(2)
    x = rng.uniform(sys_.low, sys_.high, size=(2000, 4))
    mu = rng.uniform(-1, 1, size=(2000, 2))
    d = np.abs(sys_.step(x, mu) - x)
    assert np.all((d == 0) | (d >= sys_.params["deadband"]))
    assert np.any(d == 0)


def test_perturb_zero_is_identity():
    sys_ = make_system("hand_surrogate")
    p = perturb_system(sys_, 0.0, seed=5)
    rng = np.random.default_rng(0)
    x, mu = rng.uniform(sys_.low, sys_.high, size=(100, 4)), rng.uniform(-1, 1, size=(100, 2))
    np.testing.assert_array_equal(p.step(x, mu), sys_.step(x, mu))


def test_perturb_deterministic_and_leaves_original():
    sys_ = make_system("hand_surrogate")
    w = sys_.params["W"].copy()
    a, b = perturb_system(sys_, 0.1, 7), perturb_system(sys_, 0.1, 7)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k], b.params[k])
    np.testing.assert_array_equal(sys_.params["W"], w)
    assert not np.array_equal(a.params["W"], w)
    np.testing.assert_array_equal(a.low, sys_.low)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_perturbed_logistic_interval(seed):
    rho = perturb_system(make_system("logistic"), 0.05, seed).params["rho"]
    assert 3.8 <= rho <= 4.2


def test_single_triple_dataset():
    sys_ = make_system("pendulum")
    d = generate_dataset(sys_, PolicySpec(), n_traj=1, traj_len=1, seed=0)
    assert len(d) == 1
    np.testing.assert_array_equal(d.xp[0], sys_.step(d.x[0], d.mu[0]))


def test_dataset_triples_are_exact_and_contiguous():
    sys_ = make_system("hand_surrogate")
    d = generate_dataset(sys_, PolicySpec(), n_traj=5, traj_len=200, seed=4)
    np.testing.assert_array_equal(d.xp, sys_.step(d.x, d.mu))
    for rows in d.trajectories():
        np.testing.assert_array_equal(d.x[rows[1:]], d.xp[rows[:-1]])
        assert np.all(np.diff(d.step[rows]) == 1)


def test_dataset_determinism_and_batch_independence():
    sys_ = make_system("pendulum")
    a = generate_dataset(sys_, PolicySpec(), n_traj=4, traj_len=30, seed=9)
    b = generate_dataset(sys_, PolicySpec(), n_traj=4, traj_len=30, seed=9)
    assert a.to_csv_text() == b.to_csv_text()
    # the second trajectory generated alone matches its copy in the batch
    c = generate_dataset(sys_, PolicySpec(), n_traj=1, traj_len=30, seed=9, first_traj_id=1)
    np.testing.assert_array_equal(c.x, a.subset([1]).x)


def test_start_states_in_central_box():
    sys_ = make_system("henon")
    d = generate_dataset(sys_, PolicySpec(), n_traj=200, traj_len=1, seed=0)
    half = (sys_.high - sys_.low) / 2
    assert np.all(np.abs(d.x) <= 0.8 * half + 1e-12)


def test_escaping_trajectories_truncated_and_flagged():
    sys_ = make_system("logistic", {"rho": 4.5})
    d = generate_dataset(sys_, None, n_traj=20, traj_len=50, seed=0)
    assert d.meta["truncated"]
    assert np.all((d.xp >= 0) & (d.xp <= 1))
    assert len(d) < 20 * 50


def test_default_dataset_size():
    d = generate_dataset(make_system("hand_surrogate"), PolicySpec(), seed=0)
    assert len(d) == 300_000


def test_policy_actions_in_range():
    rng = np.random.default_rng(0)
    a = PolicySpec(unit=0.5, hold_min=2, hold_max=4).sample(rng, 500, 2)
    assert a.shape == (500, 2)
    assert np.all(np.abs(a) <= 0.5)


def test_noise_recorded_in_metadata():
    d = generate_dataset(make_system("pendulum"), PolicySpec(), n_traj=2, traj_len=10, seed=0, noise_std=1e-3)
    assert d.meta["noise_std"] == 1e-3


def test_pendulum_rest_is_fixed_point():
    traj = rollout_true(make_system("pendulum"), np.zeros(2), np.zeros((20, 1)))
    np.testing.assert_array_equal(traj, np.zeros((21, 2)))


def test_logistic_rollout_by_hand():
    traj = rollout_true(make_system("logistic"), np.array([0.2]), n=3)[:, 0]
    np.testing.assert_allclose(traj[1:], [0.64, 0.9216, 0.28901376], rtol=0, atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(0, 15), st.integers(0, 15))
def test_rollout_gluing(seed, n1, n2):
    sys_ = make_system("hand_surrogate")
    rng = np.random.default_rng(seed)
    x0 = rng.uniform(sys_.low, sys_.high) * 0.5
    a = rng.uniform(-1, 1, size=(n1 + n2, 2))
    whole = rollout_true(sys_, x0, a)
    first = rollout_true(sys_, x0, a[:n1])
    rest = rollout_true(sys_, first[-1], a[n1:])
    np.testing.assert_array_equal(whole, np.vstack([first, rest[1:]]))


def test_csv_round_trip(tmp_path):
    d = generate_dataset(make_system("hand_surrogate"), PolicySpec(), n_traj=3, traj_len=20, seed=1)
    path = tmp_path / "d.csv"
    d.save(path)
    back = TransitionDataset.load(path)
    for k in ("x", "mu", "xp", "traj_id", "step"):
        np.testing.assert_array_equal(getattr(back, k), getattr(d, k))
    assert back.meta["seed"] == 1
    assert path.read_text().splitlines()[0] == ("traj_id,step,x_0,x_1,x_2,x_3,mu_0,mu_1,"
                                                "xp_0,xp_1,xp_2,xp_3")


def test_hand_default_stays_in_workspace():
    sys_ = make_system("hand_surrogate")
    for seed in range(3):
        d = generate_dataset(perturb_system(sys_, 0.1, seed), PolicySpec(), n_traj=30, traj_len=1000, seed=seed)
        assert d.meta["truncated"] == []
