"""Trajectory storage, sequence sampling and hindsight goal relabeling."""

from __future__ import annotations

import collections
import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .autodiff import load_tensors, save_tensors


@dataclass(frozen=True)
class Trajectory:
    """One episode. ``rewards[s]`` belongs to the transition o_s -> o_{s+1}."""

    observations: np.ndarray  # (T+1, W, W)
    actions: np.ndarray  # (T, A)
    log_behavior: np.ndarray  # (T,)
    rewards: np.ndarray  # (T,)
    goal: np.ndarray  # (W, W)
    episode_id: int = 0

    def __post_init__(self):
        t = len(self.actions)
        if t < 1:
            raise ValueError("trajectory must contain at least one transition")
        if len(self.observations) != t + 1 or len(self.log_behavior) != t or len(self.rewards) != t:
            raise ValueError(
                f"inconsistent trajectory lengths: {len(self.observations)} observations, "
                f"{t} actions, {len(self.log_behavior)} log-densities, {len(self.rewards)} rewards"
            )
        if self.goal.shape != self.observations.shape[1:]:
            raise ValueError(f"goal shape {self.goal.shape} != observation shape {self.observations.shape[1:]}")
        if not np.all((self.rewards == 0) | (self.rewards == 1)):
            raise ValueError("rewards must be 0 or 1")
        if not np.all(np.isfinite(self.log_behavior)):
            raise ValueError("behavior log-densities must be finite")

    @property
    def length(self) -> int:
        return len(self.actions)


@dataclass(frozen=True)
class SequenceSample:
    """A contiguous slice of one trajectory, ``length`` transitions long.

    ``terminal_mask[s]`` is 1 for transitions that take part in the loss; after
    relabeling, transitions past the rewarded one are masked out.
    """

    observations: np.ndarray  # (L+1, W, W)
    actions: np.ndarray  # (L, A)
    rewards: np.ndarray  # (L,)
    log_behavior: np.ndarray  # (L,)
    goal: np.ndarray
    relabeled: bool = False
    terminal_mask: np.ndarray | None = None

    @property
    def length(self) -> int:
        return len(self.actions)

    @property
    def mask(self) -> np.ndarray:
        return np.ones(self.length) if self.terminal_mask is None else self.terminal_mask


class ReplayBuffer:
    """FIFO ring of trajectories."""

    def __init__(self, capacity: int = 100_000):
        if capacity < 1:
            raise ValueError("replay.capacity must be >= 1")
        self.capacity = capacity
        self._items: collections.deque[Trajectory] = collections.deque(maxlen=capacity)
        self._n_obs = 0

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self):
        return iter(self._items)

    def __getitem__(self, i: int) -> Trajectory:
        return self._items[i]

    def append(self, traj: Trajectory) -> None:
        if not isinstance(traj, Trajectory):
            raise TypeError("append expects a Trajectory")
        if self._items and traj.observations.shape[1:] != self._items[0].observations.shape[1:]:
            raise ValueError("trajectory observation shape differs from buffer contents")
        if len(self._items) == self.capacity:
            self._n_obs -= len(self._items[0].observations)
        self._items.append(traj)
        self._n_obs += len(traj.observations)

    @property
    def n_observations(self) -> int:
        return self._n_obs

    def sample_sequences(self, batch: int, length: int, rng: np.random.Generator) -> list[SequenceSample]:
        if not self._items:
            raise ValueError("cannot sample from an empty replay buffer")
        out = []
        for _ in range(batch):
            traj = self._items[int(rng.integers(len(self._items)))]
            start = int(rng.integers(traj.length))
            out.append(slice_sequence(traj, start, length))
        return out

    def sample_observation(self, rng: np.random.Generator) -> tuple[int, int]:
        """(trajectory index, step) uniform over every stored observation."""
        if not self._items:
            raise ValueError("cannot sample from an empty replay buffer")
        k = int(rng.integers(self._n_obs))
        for i, traj in enumerate(self._items):
            n = len(traj.observations)
            if k < n:
                return i, k
            k -= n
        raise AssertionError("observation count out of sync")

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        tensors, index = {}, []
        for k, t in enumerate(self._items):
            for field_name in ("observations", "actions", "log_behavior", "rewards", "goal"):
                tensors[f"{k}.{field_name}"] = getattr(t, field_name)
            index.append({"episode_id": t.episode_id, "length": t.length})
        save_tensors(d / "replay.bin", tensors)
        (d / "replay.json").write_text(json.dumps({"capacity": self.capacity, "trajectories": index}))

    @classmethod
    def load(cls, directory) -> "ReplayBuffer":
        d = Path(directory)
        meta = json.loads((d / "replay.json").read_text())
        tensors = load_tensors(d / "replay.bin")
        buf = cls(meta["capacity"])
        for k, entry in enumerate(meta["trajectories"]):
            fields = {f: tensors[f"{k}.{f}"] for f in ("observations", "actions", "log_behavior", "rewards", "goal")}
            buf.append(Trajectory(episode_id=entry["episode_id"], **fields))
        return buf


def slice_sequence(traj: Trajectory, start: int, length: int) -> SequenceSample:
    """Up to ``length`` transitions from ``start``; truncated at the episode end."""
    stop = min(start + length, traj.length)
    return SequenceSample(
        observations=traj.observations[start : stop + 1],
        actions=traj.actions[start:stop],
        rewards=traj.rewards[start:stop],
        log_behavior=traj.log_behavior[start:stop],
        goal=traj.goal,
    )


def first_arrival(sample: SequenceSample, k: int) -> int:
    """Earliest step j <= k whose observation is bit-equal to o_k (j >= 1)."""
    target = sample.observations[k]
    for j in range(1, k + 1):
        if np.array_equal(sample.observations[j], target):
            return j
    return k


def relabel(
    sample: SequenceSample,
    p_goal: float,
    rng: np.random.Generator,
    reward_on_first_arrival: bool = True,
) -> SequenceSample:
    """Hindsight relabeling with probability ``p_goal``.

    Draws k uniformly from 1..L, uses o_k as the goal and puts the single unit
    reward on the transition that arrives at that observation. With
    ``reward_on_first_arrival`` an earlier bit-identical visit of the same
    observation receives the reward instead, so the indicator reward stays
    consistent with pixel equality.
    """
    if rng.uniform() >= p_goal:
        return sample
    n = sample.length
    k = int(rng.integers(1, n + 1))
    j = first_arrival(sample, k) if reward_on_first_arrival else k
    rewards = np.zeros(n)
    rewards[j - 1] = 1.0
    mask = np.zeros(n)
    mask[:j] = 1.0
    return replace(
        sample,
        goal=sample.observations[k],
        rewards=rewards,
        relabeled=True,
        terminal_mask=mask,
    )
