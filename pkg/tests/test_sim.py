import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from shiftsafe.sim import (EgoInput, EgoState, SimConfig, check_collision, ego_step, environment,
                           estimate_nuisance, goal_latitudes, obstacle_step, rollout_ego, sample_environment,
                           simulate_obstacles)

CFG = SimConfig()


def test_ego_straight_line():
    s = ego_step(EgoState(1.0, 2.0, 0.0, 1.0), EgoInput(0.0, 0.0), 0.125)
    assert (s.x, s.y, s.theta, s.v) == (1.125, 2.0, 0.0, 1.0)


def test_ego_at_rest_ignores_steering():
    s = ego_step(EgoState(1.0, 2.0, 0.3, 0.0), EgoInput(0.5, 0.0), 0.125)
    assert (s.x, s.y, s.theta) == (1.0, 2.0, 0.3)


def test_ego_heading_up():
    s = ego_step(EgoState(0.0, 0.0, math.pi / 2, 2.0), EgoInput(0.0, 0.0), 0.125)
    assert abs(s.x) < 1e-12 and s.y == pytest.approx(0.25)


@given(st.lists(st.tuples(st.floats(-0.6, 0.6), st.floats(-2, 2)), min_size=1, max_size=40),
       st.floats(0, 2))
def test_speed_stays_clamped(inputs, v0):
    X = rollout_ego(EgoState(0, 0, 0, v0), np.array(inputs), CFG)
    assert np.all(X[:, 3] >= CFG.v_min) and np.all(X[:, 3] <= CFG.v_max)


def test_goal_latitudes():
    a, b = goal_latitudes(1)
    assert np.allclose(a, (-0.06, -0.03)) and np.allclose(b, (0.03, 0.06))
    assert np.allclose(goal_latitudes(10)[0], (0.21, 0.24))
    with pytest.raises(ValueError):
        goal_latitudes(11)


def test_training_environment_layout():
    e = environment("train")
    assert e.starts == ((20.0, -0.5), (30.0, 0.5)) and e.goal_x == (0.0, 10.0)
    p = sample_environment(e, np.random.default_rng(0))
    assert np.all((p.speeds >= 0.5) & (p.speeds <= 1.0))
    assert -0.515 <= p.goals[0, 1] <= -0.485


def test_obstacle_straight_advance():
    pos, vel, done = obstacle_step(np.array([5.0, 0.0]), np.array([0.8, 0.0]), np.array([10.0, 0.0]), 0.8, [], 0.125)
    assert np.allclose(pos, [5.1, 0.0]) and not done


def test_obstacle_goal_is_absorbing():
    pos, vel, done = obstacle_step(np.array([9.95, 0.0]), np.array([0.8, 0.0]), np.array([10.0, 0.0]), 0.8, [], 0.125)
    assert done and np.allclose(pos, [10.0, 0.0]) and np.all(vel == 0)


def test_head_on_obstacles_separate():
    cfg = SimConfig(vel_noise=0.0)
    p = [np.array([0.0, 0.0]), np.array([6.0, 0.0])]
    v = [np.array([0.8, 0.0]), np.array([-0.8, 0.0])]
    goals = [np.array([20.0, 0.0]), np.array([-14.0, 0.0])]
    seps, dists = [], []
    for _ in range(50):
        new = [obstacle_step(p[i], v[i], goals[i], 0.8, [(p[1 - i], v[1 - i])], 0.125, cfg) for i in range(2)]
        p, v = [n[0] for n in new], [n[1] for n in new]
        if p[0][0] < p[1][0]:  # still approaching
            seps.append(abs(p[0][1] - p[1][1]))
        dists.append(np.linalg.norm(p[0] - p[1]))
    assert p[0][0] > p[1][0], "the pair should have passed each other"
    opened = [s for s in seps if s > 0]
    assert opened and all(b >= a - 1e-12 for a, b in zip(opened, opened[1:]))
    assert min(dists) > 0.2


def test_nuisance_examples():
    Y = np.zeros((9, 2, 2))
    assert estimate_nuisance(Y, 8, 0.125) == 0.0
    Y[:, 0, 1] = 0.01 * np.arange(9)
    assert estimate_nuisance(Y, 8, 0.125) == pytest.approx(0.04)
    assert estimate_nuisance(2 * Y, 8, 0.125) == pytest.approx(0.08)
    with pytest.raises(ValueError):
        estimate_nuisance(Y[:5], 8, 0.125)


def test_collision_examples():
    assert check_collision([0, 0], [[1, 0]], 0.5) == (False, 0.5)
    hit, m = check_collision([2, 3], [[2, 3]], 0.3)
    assert hit and m == pytest.approx(-0.3)
    hit, m = check_collision([0, 0], [[0.6, 0], [0, 0.4]], 0.5)
    assert hit and m == pytest.approx(-0.1)


def test_episodes_are_deterministic():
    e = environment(4)
    run = lambda: simulate_obstacles(e, sample_environment(e, np.random.default_rng(7)), CFG, np.random.default_rng(8))
    assert np.array_equal(run(), run())


def test_nuisance_increases_across_environments():
    means = []
    for k in range(1, 11):
        e = environment(k)
        etas = []
        for n in range(200):
            rng = np.random.default_rng([k, n])
            Y = simulate_obstacles(e, sample_environment(e, rng), CFG, rng, T=CFG.T_b)
            etas.append(estimate_nuisance(Y, CFG.T_b, CFG.dt))
        means.append(np.mean(etas))
    assert all(b > a for a, b in zip(means, means[1:]))
