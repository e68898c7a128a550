"""Self-supervised data collection and the position-space evaluation metric.

Positions are kept in :class:`GoalSource`, next to (not inside) the replay
buffer, so the learner only ever sees images, actions, rewards and
log-densities.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .envs import Env
from .nets import GaussianPolicy, gaussian_log_prob, sample_actions
from .oracle import bfs_distance
from .replay import ReplayBuffer, Trajectory


class GoalSource:
    """Draws goals uniformly over every observation stored in the replay buffer."""

    def __init__(self, buffer: ReplayBuffer, env: Env):
        self.buffer, self.env = buffer, env
        self._positions: dict[int, np.ndarray] = {}

    @property
    def bootstrap(self) -> bool:
        return len(self.buffer) == 0

    def add(self, traj: Trajectory, positions: np.ndarray) -> None:
        self.buffer.append(traj)
        self._positions[traj.episode_id] = np.asarray(positions, float)
        if len(self._positions) > 2 * self.buffer.capacity:
            live = {t.episode_id for t in self.buffer}
            self._positions = {k: v for k, v in self._positions.items() if k in live}

    def positions_of(self, episode_id: int) -> np.ndarray:
        return self._positions[episode_id]

    def sample_goal(self, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        if self.bootstrap:
            state, obs = self.env.reset(rng)
            return obs, self.env.eval_position(state)
        i, step = self.buffer.sample_observation(rng)
        traj = self.buffer[i]
        return traj.observations[step], self._positions[traj.episode_id][step]


@dataclass
class EpisodeResult:
    observations: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    positions: np.ndarray
    states: list


def run_episodes(env: Env, policy, goals: np.ndarray, rng: np.random.Generator,
                 horizon: int | None = None, deterministic: bool = False,
                 start_states: list | None = None) -> list[EpisodeResult]:
    """Roll K episodes in lockstep; ``policy.act`` sees images only."""
    horizon = horizon or env.config.horizon
    k = len(goals)
    if start_states is None:
        starts = [env.reset(rng) for _ in range(k)]
    else:
        starts = [(s, env.render(s)) for s in start_states]
    states = [s for s, _ in starts]
    obs = np.zeros((k, horizon + 1, *goals.shape[1:]))
    obs[:, 0] = [o for _, o in starts]
    pos = np.zeros((k, horizon + 1, env.config.position_dim))
    pos[:, 0] = [env.eval_position(s) for s in states]
    acts = np.zeros((k, horizon, env.config.action_dim))
    logp = np.zeros((k, horizon))
    trace = [list(states)]
    policy.begin(goals)
    for t in range(horizon):
        a, lp = policy.act(obs[:, t], rng, deterministic=deterministic)
        acts[:, t], logp[:, t] = a, lp
        for i in range(k):
            states[i], obs[i, t + 1] = env.step(states[i], a[i])
            pos[i, t + 1] = env.eval_position(states[i])
        trace.append(list(states))
    return [
        EpisodeResult(obs[i], acts[i], logp[i], pos[i], [row[i] for row in trace]) for i in range(k)
    ]


class PolicyActor:
    """Adapter giving a :class:`GaussianPolicy` the rollout interface; caches the goal encoding."""

    def __init__(self, policy: GaussianPolicy):
        self.policy = policy
        self._zg = None

    def begin(self, goals):
        self._zg = self.policy.encoder(goals).value

    def act(self, observations, rng, deterministic=False):
        mean, std = self.policy.from_embeddings(self.policy.encoder(observations).value, self._zg)
        mean, std = mean.value, std.value
        a = mean.copy() if deterministic else sample_actions(mean, std, rng)
        return a, gaussian_log_prob(mean, std, a)


class GraphOraclePolicy:
    """Shortest-path controller on an exact graph (gridworld); identifies nodes by their image."""

    def __init__(self, graph):
        self.graph = graph
        self.dist = bfs_distance(graph)
        self._index = {o.tobytes(): i for i, o in enumerate(graph.observations)}
        self._goals = None

    def begin(self, goals):
        self._goals = [self._index[g.tobytes()] for g in goals]

    def act(self, observations, rng, deterministic=False):
        out = np.zeros((len(observations), 2))
        for i, o in enumerate(observations):
            s, g = self._index[o.tobytes()], self._goals[i]
            nxt = self.graph.successors[s]
            out[i] = self.graph.actions[int(np.argmin(self.dist[nxt, g]))]
        return out, np.zeros(len(observations))


def collect_episode(env: Env, actor, goal: np.ndarray, rng, episode_id: int = 0,
                    horizon: int | None = None) -> tuple[Trajectory, np.ndarray]:
    """One goal-conditioned episode with the indicator reward 1[o_{t+1} == o_g]."""
    (ep,) = run_episodes(env, actor, goal[None], rng, horizon)
    rewards = np.all(ep.observations[1:] == goal, axis=(1, 2)).astype(float)
    traj = Trajectory(ep.observations, ep.actions, ep.log_probs, rewards, goal.copy(), episode_id)
    return traj, ep.positions


@dataclass
class EvalReport:
    distances: list[float]
    env_steps: int = 0
    buffer_trajectories: int = 0
    seed: int | None = None
    per_seed: dict = field(default_factory=dict)

    @property
    def median(self) -> float:
        return float(np.median(self.distances))

    @property
    def mean(self) -> float:
        return float(np.mean(self.distances))

    def as_dict(self) -> dict:
        per_seed = self.per_seed or (
            {str(self.seed): {"median": self.median, "mean": self.mean}} if self.seed is not None else {}
        )
        return {"distances": self.distances, "median": self.median, "mean": self.mean,
                "per_seed": per_seed, "env_steps": self.env_steps,
                "buffer_trajectories": self.buffer_trajectories}


def combine_reports(reports: list[EvalReport]) -> EvalReport:
    dists = [d for r in reports for d in r.distances]
    per_seed = {str(r.seed): {"median": r.median, "mean": r.mean} for r in reports}
    return EvalReport(dists, max(r.env_steps for r in reports), reports[-1].buffer_trajectories,
                      per_seed=per_seed)


def evaluate(env: Env, actor, source: GoalSource, episodes: int, rng, deterministic: bool = False,
             env_steps: int = 0, seed: int | None = None) -> EvalReport:
    """Final-step L1 position distance for ``episodes`` goal-conditioned episodes."""
    if episodes < 1:
        raise ValueError("evaluate needs at least one episode")
    drawn = [source.sample_goal(rng) for _ in range(episodes)]
    goals = np.stack([g for g, _ in drawn])
    results = run_episodes(env, actor, goals, rng, deterministic=deterministic)
    dists = [env.position_distance(r.positions[-1], p) for r, (_, p) in zip(results, drawn)]
    return EvalReport(dists, env_steps, len(source.buffer), seed)
