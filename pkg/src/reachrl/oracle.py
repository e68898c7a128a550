"""Exact reference quantities on discretized environments."""

from __future__ import annotations

import collections
import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .envs import EnvGraph


def bfs_distance(graph: EnvGraph) -> np.ndarray:
    """All-pairs minimum transition counts d[s, g]; ``inf`` when unreachable.

    Runs one backward BFS per goal over the reversed edge set.
    """
    n = graph.n_nodes
    preds = [set() for _ in range(n)]
    for s in range(n):
        for t in graph.successors[s]:
            preds[int(t)].add(s)
    dist = np.full((n, n), np.inf)
    for g in range(n):
        dist[g, g] = 0.0
        queue = collections.deque([g])
        while queue:
            u = queue.popleft()
            for p in preds[u]:
                if dist[p, g] == np.inf:
                    dist[p, g] = dist[u, g] + 1
                    queue.append(p)
    return dist


@dataclass
class QTable:
    values: np.ndarray  # (s, a, g)
    gamma: float
    residual: float
    iterations: int

    def best(self) -> np.ndarray:
        return self.values.max(axis=1)


def _indicator_backup(q: np.ndarray, succ: np.ndarray, gamma: float) -> np.ndarray:
    n = succ.shape[0]
    eye = np.eye(n, dtype=bool)
    arrive = eye[succ]  # (s, a, g): successor equals goal
    best = q.max(axis=1)  # (s, g)
    gate = ~arrive & ~eye[:, None, :]
    return arrive + gate * gamma * best[succ]


def value_iteration_indicator(graph: EnvGraph, gamma: float, tol: float = 1e-12, max_iter: int = 100_000) -> QTable:
    """Synchronous value iteration of the goal-reaching Bellman equation.

    Q(s, a, g) = 1[s' == g] + 1[s' != g] 1[s != g] gamma max_a' Q(s', a', g)
    with s' the deterministic successor; reaching the goal ends the episode.
    """
    if not 0.0 < gamma < 1.0:
        raise ValueError("gamma must lie in (0, 1)")
    if tol <= 0:
        raise ValueError("tol must be positive")
    succ = graph.successors
    q = np.zeros((graph.n_nodes, graph.n_actions, graph.n_nodes))
    for it in range(1, max_iter + 1):
        new = _indicator_backup(q, succ, gamma)
        change = float(np.abs(new - q).max())
        q = new
        if change <= tol:
            break
    residual = float(np.abs(_indicator_backup(q, succ, gamma) - q).max())
    return QTable(q, gamma, residual, it)


def distance_value_gap(table: QTable, dist: np.ndarray) -> float:
    """max |max_a Q*(s, a, g) - gamma**(d(s, g) - 1)| over reachable s != g."""
    n = dist.shape[0]
    sel = np.isfinite(dist) & ~np.eye(n, dtype=bool)
    expected = table.gamma ** (dist[sel] - 1)
    return float(np.abs(table.best()[sel] - expected).max()) if sel.any() else 0.0


# --- successor representation ---------------------------------------------------


def successor_rep(transitions: np.ndarray, policy: np.ndarray, gamma: float) -> np.ndarray:
    """Exact Psi(s, a, g) for a finite MDP.

    ``transitions[s, a, s']`` are probabilities; ``policy`` is either (S, A) or,
    goal-conditioned, (G, S, A). Solves
    Psi(s,a,g) = sum_s' P(s'|s,a) (1[s'==g] + gamma sum_a' pi(a'|s',g) Psi(s',a',g)).
    """
    p = np.asarray(transitions, float)
    n_s, n_a, _ = p.shape
    if not 0.0 <= gamma < 1.0:
        raise ValueError("successor_rep: gamma must lie in [0, 1); the system is singular at gamma = 1")
    pi = np.asarray(policy, float)
    if pi.ndim == 2:
        pi = np.broadcast_to(pi, (n_s, n_s, n_a))
    psi = np.zeros((n_s, n_a, n_s))
    flat_p = p.reshape(n_s * n_a, n_s)
    for g in range(n_s):
        # M[(s,a),(s',a')] = P(s'|s,a) pi(a'|s',g)
        m = (flat_p[:, :, None] * pi[g][None]).reshape(n_s * n_a, n_s * n_a)
        system = np.eye(n_s * n_a) - gamma * m
        if np.linalg.cond(system) > 1e12:
            raise np.linalg.LinAlgError("successor_rep: singular system")
        psi[:, :, g] = np.linalg.solve(system, flat_p[:, g]).reshape(n_s, n_a)
    return psi


def policy_evaluation(transitions: np.ndarray, policy: np.ndarray, reward: np.ndarray, gamma: float) -> np.ndarray:
    """Q^pi for a reward paid on arrival in s', by direct linear solve."""
    p = np.asarray(transitions, float)
    n_s, n_a, _ = p.shape
    flat_p = p.reshape(n_s * n_a, n_s)
    m = (flat_p[:, :, None] * np.asarray(policy, float)[None]).reshape(n_s * n_a, n_s * n_a)
    q = np.linalg.solve(np.eye(n_s * n_a) - gamma * m, flat_p @ np.asarray(reward, float))
    return q.reshape(n_s, n_a)


# --- learned vs exact -----------------------------------------------------------


@dataclass
class ComparisonReport:
    max_abs_error: float
    mean_abs_error: float
    spearman: float

    def as_dict(self) -> dict:
        return {"max_abs_error": self.max_abs_error, "mean_abs_error": self.mean_abs_error,
                "spearman": self.spearman}


def graph_q_values(q_fn, graph: EnvGraph) -> np.ndarray:
    """Evaluate ``q_fn(obs, actions, goals)`` on every (s, a, g) of the graph."""
    n, na = graph.n_nodes, graph.n_actions
    out = np.zeros((n, na, n))
    s_idx = np.repeat(np.arange(n), na)
    a_idx = np.tile(np.arange(na), n)
    obs, acts = graph.observations[s_idx], graph.actions[a_idx]
    for g in range(n):
        goals = np.broadcast_to(graph.observations[g], obs.shape)
        out[:, :, g] = np.asarray(q_fn(obs, acts, goals)).reshape(n, na)
    return out


def oracle_vs_learned(q_fn, graph: EnvGraph, gamma: float, table: QTable | None = None,
                      dist: np.ndarray | None = None) -> ComparisonReport:
    table = table or value_iteration_indicator(graph, gamma)
    dist = bfs_distance(graph) if dist is None else dist
    learned = graph_q_values(q_fn, graph)
    err = np.abs(learned - table.values)
    n = graph.n_nodes
    sel = np.isfinite(dist) & ~np.eye(n, dtype=bool)
    best = np.clip(learned.max(axis=1), 1e-300, None)
    implied = -np.log(best) / -math.log(gamma)
    rho = stats.spearmanr(implied[sel], dist[sel]).statistic if sel.sum() > 2 else float("nan")
    return ComparisonReport(float(err.max()), float(err.mean()), float(rho))


def write_table_csv(path, values: np.ndarray, schema: str) -> None:
    """(s, a, g, value) rows for a QTable, or (s, g, value) for a DistanceTable."""
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema: {schema}\n")
        w = csv.writer(fh)
        if values.ndim == 3:
            w.writerow(["s", "a", "g", "value"])
            for (s, a, g), v in np.ndenumerate(values):
                w.writerow([s, a, g, repr(float(v))])
        else:
            w.writerow(["s", "g", "value"])
            for (s, g), v in np.ndenumerate(values):
                w.writerow([s, g, repr(float(v))])


def embedding_spearman(z: np.ndarray, dist: np.ndarray) -> float:
    """Spearman rho between ||z_s - z_g|| and d(s, g) over ordered pairs s != g with finite d."""
    n = len(z)
    sel = np.isfinite(dist) & ~np.eye(n, dtype=bool)
    pair = np.sqrt(((z[:, None, :] - z[None, :, :]) ** 2).sum(-1))
    return float(stats.spearmanr(pair[sel], dist[sel]).statistic)


@dataclass
class LatentConsistency:
    model_error: float  # mean ||f(phi(o_t), a_t) - phi(o_{t+1})||
    pair_distance: float  # mean ||phi(s) - phi(g)|| over pairs with d(s, g) >= 2

    def as_dict(self) -> dict:
        return {"model_error": self.model_error, "pair_distance": self.pair_distance}


def latent_consistency(q, env, graph: EnvGraph, dist: np.ndarray, rng, n: int = 500) -> LatentConsistency:
    """Latent model error on fresh uniform-action transitions from random resets vs the embedding scale."""
    obs, acts, nxt = [], [], []
    for _ in range(n):
        state, o = env.reset(rng)
        a = rng.uniform(-1.0, 1.0, size=env.config.action_dim)
        _, o2 = env.step(state, a)
        obs.append(o)
        acts.append(a)
        nxt.append(o2)
    z = q.embed(np.stack(obs)).value
    pred = q.dynamics(z, np.clip(np.stack(acts), -1.0, 1.0)).value
    target = q.embed(np.stack(nxt)).value
    model_error = float(np.linalg.norm(pred - target, axis=1).mean())
    zg = q.embed(graph.observations).value
    far = np.argwhere(np.isfinite(dist) & (dist >= 2))
    pick = far[rng.choice(len(far), size=min(n, len(far)), replace=False)]
    pair = float(np.linalg.norm(zg[pick[:, 0]] - zg[pick[:, 1]], axis=1).mean())
    return LatentConsistency(model_error, pair)
