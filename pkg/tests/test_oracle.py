import time

import numpy as np
import pytest

from conftest import random_mdp, random_policy
from zsrl.envs import FiniteMDP, env_tasks, make_env, task_goal
from zsrl.oracle import (
    episode_score,
    exact_q_from_m,
    exact_successor_features,
    exact_successor_measure,
    greedy_policy,
    iterative_policy_evaluation,
    shortest_path_lengths,
    success_probability,
    value_iteration,
)


def cycle(gamma):
    p = np.zeros((2, 1, 2))
    p[0, 0, 1] = p[1, 0, 0] = 1.0
    return FiniteMDP(p, np.array([1.0, 0.0]), gamma, np.zeros(2, bool))


def test_two_state_cycle_hand_solution():
    m = exact_successor_measure(cycle(0.5), np.ones((2, 1)))
    np.testing.assert_allclose(m[0, 0], [2 / 3, 4 / 3], atol=1e-12)
    np.testing.assert_allclose(m[1, 0], [4 / 3, 2 / 3], atol=1e-12)
    np.testing.assert_allclose(m.sum(-1), 2.0, atol=1e-12)


def test_gamma_zero_gives_transition(rng):
    mdp = random_mdp(rng, 6, 3, 0.0)
    m = exact_successor_measure(mdp, random_policy(rng, 6, 3))
    np.testing.assert_allclose(m, mdp.transition, atol=1e-12)


def test_row_sums_on_grid5(rng):
    env = make_env("grid5")
    pi = random_policy(rng, env.n_states, env.n_actions)
    m = exact_successor_measure(env.mdp, pi)
    assert np.all(m >= -1e-12)
    np.testing.assert_allclose(m.sum(-1), 1 / (1 - env.gamma), atol=1e-6)


def test_q_from_m_trivial_rewards(rng):
    mdp = random_mdp(rng, 5, 2, 0.9)
    m = exact_successor_measure(mdp, random_policy(rng, 5, 2))
    np.testing.assert_allclose(exact_q_from_m(m, np.zeros(5)), 0.0)
    np.testing.assert_allclose(exact_q_from_m(m, np.ones(5)), 10.0, atol=1e-9)


def test_grid5_goal_matches_bellman_fixed_point(rng):
    env = make_env("grid5")
    r = env_tasks(env)["reach_top_right"]
    pi = random_policy(rng, env.n_states, env.n_actions)
    q = exact_q_from_m(exact_successor_measure(env.mdp, pi), r)
    np.testing.assert_allclose(q, iterative_policy_evaluation(env.mdp, pi, r), atol=1e-6)


def test_value_iteration_self_loop():
    mdp = FiniteMDP(np.ones((1, 1, 1)), np.ones(1), 0.5, np.zeros(1, bool))
    q, pi = value_iteration(mdp, np.ones(1), tol=1e-12)
    assert q[0, 0] == pytest.approx(2.0)
    with pytest.raises(ValueError):
        value_iteration(mdp, np.ones(1), tol=0)


def test_value_iteration_residual_and_fixed_point(rng):
    mdp = random_mdp(rng, 8, 3, 0.9)
    r = rng.random(8)
    q, pi = value_iteration(mdp, r, tol=1e-8)
    residual = np.abs(mdp.transition @ (r + mdp.gamma * q.max(1)) - q).max()
    assert residual <= 1e-8
    q_pi = iterative_policy_evaluation(mdp, pi, r)
    np.testing.assert_array_equal(greedy_policy(q_pi), pi)


def test_maze_optimal_return_equals_shortest_path_sum():
    # deterministic variant of the maze so the optimal value is a geometric sum
    from dataclasses import replace

    from zsrl.envs import build_mdp, maze10_layout

    layout = replace(maze10_layout(), slip=0.0)
    mdp = build_mdp(layout)
    goal = layout.index(8, 8)
    r = np.zeros(mdp.n_states)
    r[goal] = 1.0
    q, _ = value_iteration(mdp, r, tol=1e-12)
    dist = shortest_path_lengths(mdp, goal)
    g = mdp.gamma
    # the goal cell has no wall to push against, so the best loop re-enters it every two steps
    assert all(mdp.transition[goal, a, goal] == 0 for a in range(4))
    for s in range(mdp.n_states):
        if s != goal:
            assert q[s].max() == pytest.approx(g ** (dist[s] - 1) / (1 - g**2), rel=1e-8)
    assert q[goal].max() == pytest.approx(g / (1 - g**2), rel=1e-8)


def test_greedy_policy_tie_break():
    pi = greedy_policy(np.array([[1.0, 1.0, 0.0]]))
    np.testing.assert_array_equal(pi, [[1.0, 0.0, 0.0]])


def test_successor_features(rng):
    mdp = random_mdp(rng, 6, 2, 0.8)
    pi = random_policy(rng, 6, 2)
    m = exact_successor_measure(mdp, pi)
    np.testing.assert_allclose(exact_successor_features(mdp, pi, np.eye(6)), m, atol=1e-12)
    np.testing.assert_allclose(exact_successor_features(mdp, pi, np.ones((6, 1))), 5.0, atol=1e-9)
    phi = rng.normal(size=(6, 3))
    w = rng.normal(size=3)
    psi = exact_successor_features(mdp, pi, phi)
    np.testing.assert_allclose(psi @ w, exact_q_from_m(m, phi @ w), atol=1e-10)
    with pytest.raises(ValueError):
        exact_successor_features(mdp, pi, np.ones((5, 1)))


def test_linearity_in_reward(rng):
    mdp = random_mdp(rng, 7, 2, 0.95)
    m = exact_successor_measure(mdp, random_policy(rng, 7, 2))
    r1, r2 = rng.random(7), rng.random(7)
    np.testing.assert_allclose(exact_q_from_m(m, r1 + r2), exact_q_from_m(m, r1) + exact_q_from_m(m, r2), atol=1e-10)


def test_policy_rows_checked(rng):
    mdp = random_mdp(rng, 3, 2, 0.5)
    with pytest.raises(ValueError):
        exact_successor_measure(mdp, np.ones((3, 2)))


def test_episode_score_and_success_probability():
    env = make_env("grid5")
    r = env_tasks(env)["reach_top_right"]
    q, pi = value_iteration(env.mdp, r)
    goal = task_goal(env, "reach_top_right")
    assert success_probability(env.mdp, pi, goal, 100) == pytest.approx(1.0)
    # from a uniform start the goal is reached after its distance, then held
    dist = shortest_path_lengths(env.mdp, goal)
    expected = np.mean([100 - max(d, 1) + 1 if d > 0 else 100 for d in dist])
    assert episode_score(env.mdp, pi, r, 100) == pytest.approx(expected)


def test_oracle_exactness_on_random_mdps():
    rng = np.random.default_rng(42)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        n, a = int(rng.integers(2, 51)), int(rng.integers(1, 5))
        mdp = random_mdp(rng, n, a, float(rng.uniform(0.0, 0.95)))
        pi = random_policy(rng, n, a)
        r = rng.normal(size=n)
        q = exact_q_from_m(exact_successor_measure(mdp, pi), r)
        worst = max(worst, np.abs(q - iterative_policy_evaluation(mdp, pi, r)).max())
    assert worst < 1e-6
    assert time.perf_counter() - start < 60
