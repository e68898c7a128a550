import numpy as np
import pytest
from scipy import stats

from reachrl.config import from_mapping
from reachrl.envs import EnvConfig, EnvState, discretize, make_env
from reachrl.learner import Learner
from reachrl.nets import GaussianPolicy, NetConfig, gaussian_log_prob
from reachrl.replay import ReplayBuffer, SequenceSample, Trajectory
from reachrl.rollout import (
    EvalReport, GoalSource, GraphOraclePolicy, PolicyActor, collect_episode, combine_reports, evaluate,
    run_episodes,
)
from reachrl.train import Trainer


class UniformActor:
    def begin(self, goals):
        pass

    def act(self, observations, rng, deterministic=False):
        return rng.uniform(-1, 1, size=(len(observations), 2)), np.full(len(observations), np.log(0.25))


def small_policy(seed=0):
    return PolicyActor(GaussianPolicy(NetConfig(hidden=(16, 16), embed_dim=8), np.random.default_rng(seed)))


def filled_source(env, n_traj=1, horizon=10, seed=0):
    source = GoalSource(ReplayBuffer(100), env)
    rng = np.random.default_rng(seed)
    for i in range(n_traj):
        goal, _ = source.sample_goal(rng)
        traj, pos = collect_episode(env, UniformActor(), goal, rng, episode_id=i, horizon=horizon)
        source.add(traj, pos)
    return source


def test_empty_buffer_bootstraps_from_reset():
    env = make_env(EnvConfig(name="point_mass"))
    source = GoalSource(ReplayBuffer(10), env)
    assert source.bootstrap
    goal, pos = source.sample_goal(np.random.default_rng(3))
    state, obs = env.reset(np.random.default_rng(3))
    assert np.array_equal(goal, obs) and np.array_equal(pos, env.eval_position(state))


def test_goal_frequencies_uniform_over_one_trajectory():
    env = make_env(EnvConfig(name="point_mass"))
    source = filled_source(env, 1, 10)
    traj = source.buffer[0]
    keys = {o.tobytes(): i for i, o in enumerate(traj.observations)}
    assert len(keys) == 11
    rng = np.random.default_rng(0)
    counts = np.zeros(11)
    for _ in range(10_000):
        g, _ = source.sample_goal(rng)
        counts[keys[g.tobytes()]] += 1
    assert stats.chisquare(counts).pvalue > 0.01


def test_goals_are_stored_observations_with_matching_positions():
    env = make_env(EnvConfig(name="wall_point_mass"))
    source = filled_source(env, 3, 8)
    stored = {o.tobytes() for t in source.buffer for o in t.observations}
    rng = np.random.default_rng(1)
    for _ in range(200):
        g, p = source.sample_goal(rng)
        assert g.tobytes() in stored
        assert np.array_equal(env.render(EnvState(tuple(p))), g)


def test_collect_episode_length_and_log_densities():
    env = make_env(EnvConfig(name="point_mass", horizon=12))
    actor = small_policy()
    goal = env.reset(np.random.default_rng(0))[1]
    traj, pos = collect_episode(env, actor, goal, np.random.default_rng(1))
    assert traj.length == 12 and len(traj.observations) == 13 and pos.shape == (13, 2)
    actor.begin(goal[None])
    mean, std = actor.policy.dist(traj.observations[:-1], np.repeat(goal[None], 12, 0))
    assert np.allclose(traj.log_behavior, gaussian_log_prob(mean, std, traj.actions), atol=1e-10)


def test_collect_episode_deterministic():
    env = make_env(EnvConfig(name="planar_arm"))
    goal = env.reset(np.random.default_rng(0))[1]
    a, _ = collect_episode(env, small_policy(), goal, np.random.default_rng(5))
    b, _ = collect_episode(env, small_policy(), goal, np.random.default_rng(5))
    for f in ("observations", "actions", "log_behavior", "rewards"):
        assert getattr(a, f).tobytes() == getattr(b, f).tobytes()


def test_continuous_rewards_zero():
    env = make_env(EnvConfig(name="point_mass"))
    traj, _ = collect_episode(env, UniformActor(), env.reset(np.random.default_rng(0))[1], np.random.default_rng(1))
    assert not traj.rewards.any()


def test_gridworld_reward_fires_on_arrival():
    env = make_env(EnvConfig(name="gridworld", grid_n=5, horizon=10))
    graph = discretize(env.config)
    goal = graph.observations[12]
    traj, _ = collect_episode(env, GraphOraclePolicy(graph), goal, np.random.default_rng(0))
    hits = np.flatnonzero(traj.rewards)
    assert len(hits) >= 1
    assert np.array_equal(traj.observations[hits[0] + 1], goal)


def test_bfs_oracle_policy_median_zero():
    env = make_env(EnvConfig(name="gridworld", grid_n=7, horizon=30))
    source = filled_source(env, 5, 30)
    report = evaluate(env, GraphOraclePolicy(discretize(env.config)), source, 40, np.random.default_rng(0))
    assert report.median == 0.0 and max(report.distances) == 0.0


@pytest.mark.xfail(strict=True, reason="clipped point-mass random walks pile up at the arena edges, so final "
                                        "positions are not uniform; see the decisions ledger")
def test_uniform_random_matches_independent_uniform_points():
    env = make_env(EnvConfig(name="point_mass", horizon=50))
    source = GoalSource(ReplayBuffer(10), env)  # bootstrap goals: uniform resets
    rng = np.random.default_rng(0)
    report = evaluate(env, UniformActor(), source, 400, rng)
    baseline = np.abs(rng.uniform(size=(4000, 2)) - rng.uniform(size=(4000, 2))).sum(1)
    assert stats.mannwhitneyu(report.distances, baseline).pvalue > 0.01


def test_uniform_random_matches_independent_goal_and_endpoint():
    # the metric pairs a uniform goal with an endpoint the policy never conditions on usefully,
    # so it must match independently drawn (reset, random-walk endpoint) pairs
    env = make_env(EnvConfig(name="point_mass", horizon=50))
    report = evaluate(env, UniformActor(), GoalSource(ReplayBuffer(10), env), 400, np.random.default_rng(0))
    rng = np.random.default_rng(1)
    ends = [r.positions[-1] for r in run_episodes(env, UniformActor(), np.zeros((2000, 16, 16)), rng)]
    goals = [env.eval_position(env.reset(rng)[0]) for _ in range(2000)]
    baseline = np.abs(np.array(ends) - np.array(goals)).sum(1)
    assert stats.mannwhitneyu(report.distances, baseline).pvalue > 0.01


def test_single_episode_report():
    env = make_env(EnvConfig(name="gridworld", grid_n=5))
    report = evaluate(env, UniformActor(), filled_source(env), 1, np.random.default_rng(0))
    assert len(report.distances) == 1 and report.median == report.distances[0]
    with pytest.raises(ValueError):
        evaluate(env, UniformActor(), filled_source(env), 0, np.random.default_rng(0))


def test_report_serialization_and_combination():
    a = EvalReport([0.0, 2.0, 4.0], env_steps=10, buffer_trajectories=3, seed=0)
    b = EvalReport([1.0], env_steps=12, buffer_trajectories=4, seed=1)
    assert a.as_dict()["per_seed"] == {"0": {"median": 2.0, "mean": 2.0}}
    c = combine_reports([a, b])
    assert c.distances == [0.0, 2.0, 4.0, 1.0] and c.env_steps == 12
    assert set(c.as_dict()["per_seed"]) == {"0", "1"}


def test_policy_actor_sees_only_images():
    env = make_env(EnvConfig(name="point_mass", image_size=16, horizon=5))
    seen = []

    class Recorder(PolicyActor):
        def begin(self, goals):
            seen.append(np.shape(goals))
            super().begin(goals)

        def act(self, observations, rng, deterministic=False):
            seen.append(np.shape(observations))
            return super().act(observations, rng, deterministic)

    rec = Recorder(GaussianPolicy(NetConfig(hidden=(8,), embed_dim=4), np.random.default_rng(0)))
    evaluate(env, rec, GoalSource(ReplayBuffer(4), env), 3, np.random.default_rng(0))
    assert all(s[1:] == (16, 16) for s in seen)


def test_learner_boundary_carries_no_positions(monkeypatch):
    cfg = from_mapping({"env.name": "wall_point_mass", "env.horizon": 10, "agent.hidden": (8,), "agent.embed_dim": 4,
                        "train.learn_steps_per_episode": 1, "train.batch_sequences": 2, "train.sequence_len": 4,
                        "train.total_env_steps": 40, "eval.interval_episodes": 100})
    crossed = []
    original = Learner.update

    def spy(self, samples, rng):
        crossed.extend(samples)
        return original(self, samples, rng)

    monkeypatch.setattr(Learner, "update", spy)
    trainer = Trainer(cfg)
    trainer.run()
    w = cfg.env.image_size
    assert crossed
    for s in crossed:
        assert isinstance(s, SequenceSample)
        assert s.observations.shape[1:] == (w, w) and s.goal.shape == (w, w)
        assert s.actions.shape[1] == 2 and s.rewards.ndim == 1 and s.log_behavior.ndim == 1
    for t in trainer.buffer:
        assert isinstance(t, Trajectory)
        assert not any("position" in k for k in vars(t))
