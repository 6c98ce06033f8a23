import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trqam.envs import (
    BANDIT_DATA_STD,
    BimodalBandit,
    PointMass2D,
    ReplayBuffer,
    Transition,
    bandit_value_gaussian,
    bandit_value_mixture,
    bandit_value_uniform,
    bimodal_bandit_reward,
    bimodal_bandit_step,
    dataset_from_bytes,
    dataset_to_bytes,
    export_csv,
    generate_behavior_dataset,
    load_dataset,
    make_env,
    pointmass2d_step,
    save_dataset,
)
from trqam.errors import DomainError, FormatError, ShapeError

# -- point mass


def test_pointmass_zero_action():
    s = np.array([0.0, 0.0, 0.5, 0.5])
    s2, r, done = pointmass2d_step(s, np.zeros(2))
    assert np.array_equal(s2, s)
    assert r == pytest.approx(-np.sqrt(0.5)) and not done


def test_pointmass_goal_bonus():
    s2, r, done = pointmass2d_step(np.array([0.5, 0.5, 0.5, 0.5]), np.zeros(2))
    assert r == 10.0 and done


def test_pointmass_wall_clip_and_action_clip():
    s2, _, _ = pointmass2d_step(np.array([0.95, -0.98, 0.0, 0.0]), np.array([5.0, -1.0]))
    assert np.array_equal(s2[:2], [1.0, -1.0])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=2, max_size=2), st.lists(st.floats(-50, 50), min_size=2, max_size=2))
def test_pointmass_stays_in_box_and_pure(pos, act):
    s = np.array(pos + [0.5, 0.5])
    a, b = pointmass2d_step(s, np.array(act)), pointmass2d_step(s, np.array(act))
    assert np.all(np.abs(a[0][:2]) <= 1.0)
    assert np.array_equal(a[0], b[0]) and a[1] == b[1]
    assert np.linalg.norm(a[0][:2] - s[:2]) <= 0.1 * np.sqrt(2) + 1e-12


def test_scripted_controller_reaches_goal():
    from trqam.trainer import evaluate_policy

    env = PointMass2D(noise=0.0)

    def good(s, rng):
        return env.scripted_action(s, rng, "good")

    good.is_policy = True
    ret, succ = evaluate_policy(good, env, 50, np.random.default_rng(0))
    assert succ == 1.0


def test_zero_policy_never_succeeds():
    from trqam.trainer import evaluate_policy

    env = PointMass2D(goal=(1.5, 1.5))  # at least 0.7 from every start

    def still(s, rng):
        return np.zeros((len(s), 2))

    still.is_policy = True
    ret, succ = evaluate_policy(still, env, 200, np.random.default_rng(1))
    assert succ == 0.0 and ret < 0


# -- bandit


def test_bandit_reward_values():
    assert bimodal_bandit_reward(np.array([[1.0]]))[0] == pytest.approx(1 + 0.5 * np.exp(-200), abs=0)
    assert bimodal_bandit_reward(np.array([[-1.0]]))[0] == pytest.approx(0.5, rel=1e-12)
    assert bimodal_bandit_reward(np.array([[0.0]]))[0] == pytest.approx(1.5 * np.exp(-50), rel=1e-12)


def test_bandit_step_always_done():
    s2, r, done = bimodal_bandit_step(np.zeros((3, 1)), np.array([[1.0], [0.0], [-1.0]]))
    assert done.all() and np.array_equal(s2, np.zeros((3, 1)))


def test_bandit_optimal_value():
    assert bandit_value_gaussian(1.0, 0.0) == pytest.approx(1.0, abs=1e-12)


def test_bandit_analytic_values_monte_carlo():
    rng = np.random.default_rng(0)
    n = 400_000
    for mean, std in [(1.0, 0.1), (-0.5, 0.4), (0.2, 1.0)]:
        r = bimodal_bandit_reward(rng.normal(mean, std, size=(n, 1)))
        assert abs(r.mean() - bandit_value_gaussian(mean, std)) <= 4 * r.std() / np.sqrt(n)
    r = bimodal_bandit_reward(rng.uniform(-1.5, 1.5, size=(n, 1)))
    assert abs(r.mean() - bandit_value_uniform(-1.5, 1.5)) <= 4 * r.std() / np.sqrt(n)


def test_bc_prior_value_limits():
    # half the mass exactly on each mode is worth 0.75; the behavior data's spread lowers it
    assert bandit_value_mixture(0.0) == pytest.approx(0.75, abs=1e-12)
    assert bandit_value_mixture(BANDIT_DATA_STD) == pytest.approx(0.5303, abs=1e-4)
    rng = np.random.default_rng(1)
    n = 400_000
    a = np.where(rng.random(n) < 0.5, 1.0, -1.0) + BANDIT_DATA_STD * rng.standard_normal(n)
    r = bimodal_bandit_reward(a[:, None])
    assert abs(r.mean() - bandit_value_mixture()) <= 4 * r.std() / np.sqrt(n)


# -- dataset generation


def test_dataset_size_must_be_positive():
    with pytest.raises(DomainError):
        generate_behavior_dataset(BimodalBandit(), "mixture-of-scripted", 0, 0)


def test_dataset_unknown_behavior():
    with pytest.raises(DomainError):
        generate_behavior_dataset(BimodalBandit(), "expert", 5, 0)


def test_bandit_dataset_is_bimodal():
    buf = generate_behavior_dataset(BimodalBandit(), "mixture-of-scripted", 4000, 3)
    a = buf.all().a[:, 0]
    assert 0.4 <= np.mean(np.abs(a - 1) <= 0.2) <= 0.6
    assert 0.4 <= np.mean(np.abs(a + 1) <= 0.2) <= 0.6


@pytest.mark.parametrize("env", ["bandit", "pointmass2d"])
@pytest.mark.parametrize("behavior", ["mixture-of-scripted", "uniform-noisy"])
def test_dataset_deterministic_and_finite(env, behavior):
    a = generate_behavior_dataset(make_env(env), behavior, 300, 11)
    b = generate_behavior_dataset(make_env(env), behavior, 300, 11)
    c = generate_behavior_dataset(make_env(env), behavior, 300, 12)
    assert a == b and a != c and len(a) == 300
    d = a.all()
    assert all(np.all(np.isfinite(x)) for x in (d.s, d.a, d.r, d.s2))


def test_pointmass_dataset_respects_horizon():
    env = PointMass2D(horizon=5)
    d = generate_behavior_dataset(env, "uniform-noisy", 100, 0).all()
    # episodes restart at the horizon, so no chain of s2 -> s continues for more than 5 steps
    run = longest = 1
    for i in range(1, 100):
        run = run + 1 if np.array_equal(d.s[i], d.s2[i - 1]) else 1
        longest = max(longest, run)
    assert longest <= 5


def test_make_env_unknown():
    with pytest.raises(DomainError):
        make_env("cartpole")


# -- replay buffer


def _t(x):
    return Transition(np.array([x]), np.array([x]), x, np.array([x]), False)


def test_buffer_fifo_eviction():
    buf = ReplayBuffer(1, 1, 2)
    for x in (1.0, 2.0, 3.0):
        buf.push(_t(x))
    assert len(buf) == 2 and buf.inserted == 3
    assert np.array_equal(buf.all().r, [2.0, 3.0])


def test_buffer_sample_one_element():
    buf = ReplayBuffer(1, 1, 5)
    buf.push(_t(7.0))
    assert np.array_equal(buf.sample(4, np.random.default_rng(0)).r, [7.0] * 4)


def test_buffer_sample_seeded():
    buf = generate_behavior_dataset(BimodalBandit(), "uniform-noisy", 50, 0)
    a = buf.sample(8, np.random.default_rng(3))
    b = buf.sample(8, np.random.default_rng(3))
    assert np.array_equal(a.a, b.a)


def test_buffer_sample_empty():
    with pytest.raises(DomainError):
        ReplayBuffer(1, 1, 3).sample(1, np.random.default_rng(0))


def test_buffer_rejects_bad_transitions():
    buf = ReplayBuffer(1, 1, 3)
    with pytest.raises(ShapeError):
        buf.push_many(np.zeros((1, 2)), np.zeros((1, 1)), [0.0], np.zeros((1, 2)), [False])
    with pytest.raises(DomainError):
        buf.push(_t(np.nan))
    with pytest.raises(DomainError):
        ReplayBuffer(1, 1, 0)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 20), st.integers(0, 60))
def test_buffer_holds_latest(capacity, pushes):
    buf = ReplayBuffer(1, 1, capacity)
    for i in range(pushes):
        buf.push(_t(float(i)))
    assert len(buf) == min(capacity, pushes)
    assert np.array_equal(buf.all().r, np.arange(max(0, pushes - capacity), pushes, dtype=float))
    if pushes:
        idx = buf.sample(64, np.random.default_rng(pushes)).r
        assert set(idx) <= set(buf.all().r)


# -- dataset file


def test_dataset_roundtrip(tmp_path):
    buf = generate_behavior_dataset(PointMass2D(), "mixture-of-scripted", 120, 4)
    save_dataset(tmp_path / "d.trqd", buf)
    back = load_dataset(tmp_path / "d.trqd")
    assert back == buf and back.state_dim == 4 and back.action_dim == 2


def test_dataset_header_layout():
    buf = generate_behavior_dataset(BimodalBandit(), "uniform-noisy", 3, 0)
    blob = dataset_to_bytes(buf)
    assert blob[:4] == b"TRQD"
    assert int.from_bytes(blob[4:8], "little") == 1
    assert int.from_bytes(blob[8:16], "little") == 3
    assert int.from_bytes(blob[16:20], "little") == 1 and int.from_bytes(blob[20:24], "little") == 1
    assert len(blob) == 24 + 3 * (8 * 4 + 1)


@pytest.mark.parametrize(
    "mutate",
    [
        lambda b: b"XXXX" + b[4:],
        lambda b: b[:4] + (2).to_bytes(4, "little") + b[8:],
        lambda b: b[:-1],
        lambda b: b[:10],
        lambda b: b + b"\0",
    ],
)
def test_dataset_corruption_detected(mutate):
    blob = dataset_to_bytes(generate_behavior_dataset(BimodalBandit(), "uniform-noisy", 3, 0))
    with pytest.raises(FormatError):
        dataset_from_bytes(mutate(blob))


def test_csv_mirrors_binary(tmp_path):
    buf = generate_behavior_dataset(PointMass2D(), "uniform-noisy", 10, 1)
    export_csv(tmp_path / "d.csv", buf)
    rows = list(csv.reader(open(tmp_path / "d.csv")))
    assert rows[0][:2] == ["s0", "s1"] and rows[0][-1] == "done"
    d = buf.all()
    assert len(rows) == 11
    assert float(rows[3][4]) == d.a[2, 0]
