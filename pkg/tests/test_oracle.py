import csv

import numpy as np
import pytest

from reachrl.envs import EnvConfig, EnvGraph, discretize
from reachrl.nets import GoalConditionedQ, NetConfig
from reachrl.oracle import (
    bfs_distance, distance_value_gap, oracle_vs_learned, policy_evaluation, successor_rep, value_iteration_indicator,
    write_table_csv,
)

from oracles import grid_bfs, policy_q


def chain(n=3):
    """Nodes 0..n-1 on a line; action 0 stays, 1 moves right, 2 moves left."""
    succ = np.array([[i, min(i + 1, n - 1), max(i - 1, 0)] for i in range(n)])
    obs = np.eye(n)[:, :, None] * np.ones((n, n, n))
    return EnvGraph(np.arange(n, dtype=float)[:, None].repeat(2, 1), obs, succ, np.zeros((3, 2)))


def test_grid5_corner_to_corner():
    g = discretize(EnvConfig(name="gridworld", grid_n=5))
    d = bfs_distance(g)
    assert d[0, 24] == 8 == grid_bfs(5, (0, 0), (4, 4))
    assert np.all(np.diag(d) == 0)


def test_grid_distances_match_manhattan():
    g = discretize(EnvConfig(name="gridworld", grid_n=4))
    d = bfs_distance(g)
    for s in range(16):
        for t in range(16):
            assert d[s, t] == grid_bfs(4, divmod(s, 4), divmod(t, 4))


def test_triangle_inequality_on_wall_graph():
    d = bfs_distance(discretize(EnvConfig(name="wall_point_mass"), 6))
    assert np.all(d[:, None, :] <= d[:, :, None] + d[None, :, :] + 1e-12)


def test_unreachable_is_inf():
    succ = np.array([[0, 1], [1, 1]])
    g = EnvGraph(np.zeros((2, 2)), np.zeros((2, 2, 2)), succ, np.zeros((2, 2)))
    d = bfs_distance(g)
    assert d[0, 1] == 1 and d[1, 0] == np.inf


def test_direct_edge_value_is_one():
    table = value_iteration_indicator(chain(), 0.9)
    assert table.values[0, 1, 1] == 1.0


def test_chain_two_steps_gives_gamma():
    table = value_iteration_indicator(chain(), 0.9)
    assert table.values[0, 1, 2] == pytest.approx(0.9, abs=1e-12)


def test_goal_gate_at_goal():
    table = value_iteration_indicator(chain(), 0.9)
    assert table.values[1, 0, 1] == 1.0  # stay at the goal
    assert table.values[1, 1, 1] == 0.0  # leave the goal: no continuation from o_t == o_g


@pytest.mark.parametrize("gamma", [0.5, 0.9, 0.95])
def test_distance_value_identity_grid(gamma):
    g = discretize(EnvConfig(name="gridworld", grid_n=5))
    table = value_iteration_indicator(g, gamma)
    assert distance_value_gap(table, bfs_distance(g)) <= 1e-9
    assert table.residual <= 1e-12
    assert table.values.min() >= 0 and table.values.max() <= 1


def test_distance_value_identity_wall_graph():
    g = discretize(EnvConfig(name="wall_point_mass"))
    table = value_iteration_indicator(g, 0.9)
    assert distance_value_gap(table, bfs_distance(g)) <= 1e-9


def test_value_iteration_validates_arguments():
    with pytest.raises(ValueError):
        value_iteration_indicator(chain(), 1.0)
    with pytest.raises(ValueError):
        value_iteration_indicator(chain(), 0.9, tol=0.0)


# --- successor representation -------------------------------------------------------------


def random_mdp(seed, s=6, a=3):
    rng = np.random.default_rng(seed)
    p = rng.random((s, a, s)) ** 3
    p /= p.sum(-1, keepdims=True)
    pi = rng.random((s, a))
    pi /= pi.sum(-1, keepdims=True)
    return p, pi


def test_sr_linear_reward_identity():
    p, pi = random_mdp(0)
    psi = successor_rep(p, pi, 0.9)
    rng = np.random.default_rng(1)
    for _ in range(10):
        r = rng.normal(size=6)
        assert np.abs(psi @ r - policy_q(p, pi, r, 0.9)).max() <= 1e-8


def test_sr_indicator_reward_equals_column():
    p, pi = random_mdp(2)
    psi = successor_rep(p, pi, 0.8)
    r = np.zeros(6)
    r[3] = 1.0
    assert np.allclose(policy_evaluation(p, pi, r, 0.8), psi[:, :, 3], atol=1e-12)
    assert np.all(psi >= -1e-15)


def test_sr_gamma_zero_is_one_step_probability():
    p, pi = random_mdp(3)
    assert np.allclose(successor_rep(p, pi, 0.0), p, atol=1e-15)


def test_sr_goal_conditioned_policy_and_singular_gamma():
    p, _ = random_mdp(4)
    pis = np.random.default_rng(5).random((6, 6, 3))
    pis /= pis.sum(-1, keepdims=True)
    psi = successor_rep(p, pis, 0.7)
    for g in range(6):
        r = np.eye(6)[g]
        assert np.allclose(psi[:, :, g], policy_q(p, pis[g], r, 0.7), atol=1e-10)
    with pytest.raises(ValueError):
        successor_rep(p, pis, 1.0)


# --- learned vs exact ---------------------------------------------------------------------


def test_tabular_stub_has_zero_error():
    g = discretize(EnvConfig(name="gridworld", grid_n=4))
    table = value_iteration_indicator(g, 0.9)
    index = {o.tobytes(): i for i, o in enumerate(g.observations)}
    actions = {a.tobytes(): i for i, a in enumerate(g.actions)}

    def q_fn(obs, acts, goals):
        return np.array([table.values[index[o.tobytes()], actions[a.tobytes()], index[t.tobytes()]]
                         for o, a, t in zip(obs, acts, goals)])

    rep = oracle_vs_learned(q_fn, g, 0.9, table=table)
    assert rep.max_abs_error == 0.0
    assert rep.spearman == pytest.approx(1.0)


def test_untrained_q_has_no_rank_correlation():
    g = discretize(EnvConfig(name="gridworld", grid_n=5))
    d = bfs_distance(g)
    table = value_iteration_indicator(g, 0.95)
    rhos = []
    for seed in range(5):
        q = GoalConditionedQ("structured", NetConfig(hidden=(32, 32), gamma=0.95), np.random.default_rng(seed))
        rhos.append(oracle_vs_learned(q.value, g, 0.95, table=table, dist=d).spearman)
    assert np.all(np.abs(rhos) < 0.2)


def test_table_csv_export(tmp_path):
    table = value_iteration_indicator(chain(), 0.9)
    path = tmp_path / "q.csv"
    write_table_csv(path, table.values, "reachrl.qtable/v1")
    lines = path.read_text().splitlines()
    assert lines[0] == "# schema: reachrl.qtable/v1"
    rows = list(csv.DictReader(lines[1:]))
    assert len(rows) == table.values.size
    back = np.zeros_like(table.values)
    for r in rows:
        back[int(r["s"]), int(r["a"]), int(r["g"])] = float(r["value"])
    assert np.array_equal(back, table.values)
    write_table_csv(tmp_path / "d.csv", bfs_distance(chain()), "reachrl.distance/v1")
    assert (tmp_path / "d.csv").read_text().splitlines()[1] == "s,g,value"
