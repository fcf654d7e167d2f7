"""Exact dynamic programming on finite MDPs.

These routines are the ground truth that learned successor measures, successor
features and zero-shot policies are checked against.  All values follow the
convention ``Q(s, a) = sum_t gamma^t E[r(s_{t+1})]``: reward is collected on
*arrival* in a state.
"""

from __future__ import annotations

from typing import Optional, Tuple

import numpy as np

from .envs import FiniteMDP

MAX_STATES = 2500


def _check_policy(mdp: FiniteMDP, policy: np.ndarray) -> np.ndarray:
    policy = np.asarray(policy, dtype=np.float64)
    if policy.shape != (mdp.n_states, mdp.n_actions):
        raise ValueError(f"policy must have shape {(mdp.n_states, mdp.n_actions)}")
    if np.any(policy < 0) or not np.allclose(policy.sum(1), 1.0, atol=1e-9):
        raise ValueError("policy rows must sum to one")
    return policy


def state_chain(mdp: FiniteMDP, policy: np.ndarray) -> np.ndarray:
    """State-to-state transition matrix ``P_pi[s, s']`` under ``policy``."""
    return np.einsum("sa,sat->st", policy, mdp.transition)


def exact_successor_measure(mdp: FiniteMDP, policy: np.ndarray) -> np.ndarray:
    """``M[s, a, s'] = P[s, a, :] (I - gamma P_pi)^{-1}`` via one dense linear solve."""
    policy = _check_policy(mdp, policy)
    if mdp.n_states > MAX_STATES:
        raise ValueError(f"exact solves are capped at {MAX_STATES} states")
    n, na = mdp.n_states, mdp.n_actions
    system = np.eye(n) - mdp.gamma * state_chain(mdp, policy)
    # M_flat = P_flat @ inv(system)  <=>  system^T M_flat^T = P_flat^T
    p_flat = mdp.transition.reshape(n * na, n)
    m_flat = np.linalg.solve(system.T, p_flat.T).T
    return m_flat.reshape(n, na, n)


def exact_q_from_m(m: np.ndarray, r: np.ndarray) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    if m.shape[-1] != r.shape[0]:
        raise ValueError("reward vector length does not match the successor measure")
    return m @ r


def exact_successor_features(mdp: FiniteMDP, policy: np.ndarray, features: np.ndarray) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] != mdp.n_states:
        raise ValueError("features must have one row per state")
    return exact_successor_measure(mdp, policy) @ features


def greedy_policy(q: np.ndarray) -> np.ndarray:
    """One-hot greedy policy; ``argmax`` breaks ties towards the lowest action index."""
    pi = np.zeros_like(q, dtype=np.float64)
    pi[np.arange(q.shape[0]), np.argmax(q, axis=1)] = 1.0
    return pi


def value_iteration(
    mdp: FiniteMDP, r: np.ndarray, tol: float = 1e-8, max_iter: int = 1_000_000
) -> Tuple[np.ndarray, np.ndarray]:
    """Optimal ``Q`` with sup-norm Bellman residual ``<= tol`` and its greedy policy."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    r = np.asarray(r, dtype=np.float64)
    q = np.zeros((mdp.n_states, mdp.n_actions))
    for _ in range(max_iter):
        q_new = mdp.transition @ (r + mdp.gamma * q.max(1))
        residual = np.abs(q_new - q).max()
        q = q_new
        if residual <= tol:
            break
    return q, greedy_policy(q)


def iterative_policy_evaluation(
    mdp: FiniteMDP, policy: np.ndarray, r: np.ndarray, tol: float = 1e-12, max_iter: int = 1_000_000
) -> np.ndarray:
    """Fixed point of the policy Bellman operator, by plain iteration."""
    policy = _check_policy(mdp, policy)
    r = np.asarray(r, dtype=np.float64)
    q = np.zeros((mdp.n_states, mdp.n_actions))
    for _ in range(max_iter):
        v = (policy * q).sum(1)
        q_new = mdp.transition @ (r + mdp.gamma * v)
        if np.abs(q_new - q).max() <= tol:
            return q_new
        q = q_new
    return q


def episode_score(
    mdp: FiniteMDP,
    policy: np.ndarray,
    r: np.ndarray,
    horizon: int,
    start_dist: Optional[np.ndarray] = None,
) -> float:
    """Expected undiscounted reward over a ``horizon``-step episode, computed exactly."""
    policy = _check_policy(mdp, policy)
    chain = state_chain(mdp, policy)
    dist = mdp.start_dist if start_dist is None else np.asarray(start_dist, dtype=np.float64)
    total = 0.0
    for _ in range(horizon):
        dist = dist @ chain
        total += float(dist @ r)
    return total


def success_probability(
    mdp: FiniteMDP, policy: np.ndarray, goal: int, horizon: int, start_dist: Optional[np.ndarray] = None
) -> float:
    """Probability of arriving at ``goal`` at least once within ``horizon`` steps."""
    policy = _check_policy(mdp, policy)
    chain = state_chain(mdp, policy).copy()
    chain[goal] = 0.0
    chain[goal, goal] = 1.0
    dist = mdp.start_dist if start_dist is None else np.asarray(start_dist, dtype=np.float64)
    for _ in range(horizon):
        dist = dist @ chain
    return float(dist[goal])


def shortest_path_lengths(mdp: FiniteMDP, goal: int) -> np.ndarray:
    """Breadth-first distance (in steps) from every state to ``goal`` over support edges."""
    n = mdp.n_states
    support = mdp.transition.max(1) > 0
    dist = np.full(n, np.inf)
    dist[goal] = 0
    frontier = [goal]
    while frontier:
        nxt = []
        for t in frontier:
            for s in np.nonzero(support[:, t])[0]:
                if np.isinf(dist[s]):
                    dist[s] = dist[t] + 1
                    nxt.append(s)
        frontier = nxt
    return dist
