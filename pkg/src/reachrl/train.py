"""The collect-then-learn loop, metrics rows and checkpoints."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import load_tensors, save_tensors
from .config import RunConfig
from .envs import EnvConfig, make_env
from .learner import Learner, LearnerConfig, MpoState
from .nets import GaussianPolicy, GoalConditionedQ, NetConfig
from .replay import ReplayBuffer, relabel
from .rollout import GoalSource, PolicyActor, collect_episode, evaluate

log = logging.getLogger(__name__)

METRICS_SCHEMA = "reachrl.metrics/v1"
METRICS_COLUMNS = (
    "env_steps", "learner_iters", "median_final_L1", "mean_final_L1", "q_loss", "mean_qret",
    "estep_kl", "tau_star", "relabel_fraction", "buffer_trajectories",
)
_STAT_KEYS = ("q_loss", "mean_qret", "estep_kl", "tau_star", "relabel_fraction")


def env_config(cfg: RunConfig) -> EnvConfig:
    e = cfg.env
    return EnvConfig(e.name, e.image_size, e.horizon, e.damping, e.force_gain, e.joint_speed, e.grid_n)


def net_config(cfg: RunConfig) -> NetConfig:
    a = cfg.agent
    return NetConfig(cfg.env.image_size, 2, a.embed_dim, a.conv_channels, a.conv_strides, a.hidden,
                     a.gamma, a.std_floor)


def build_agent(cfg: RunConfig, rng: np.random.Generator) -> Learner:
    nc = net_config(cfg)
    q = GoalConditionedQ(cfg.agent.arch, nc, rng)
    q_target = GoalConditionedQ(cfg.agent.arch, nc, rng)
    policy = GaussianPolicy(nc, rng)
    m = cfg.mpo
    lc = LearnerConfig(cfg.agent.gamma, cfg.train.lr, cfg.train.target_update_period,
                       MpoState(m.epsilon, m.tau_init, m.lam, m.n_action_samples))
    return Learner(q, q_target, policy, lc)


def format_row(row: dict) -> list[str]:
    out = []
    for c in METRICS_COLUMNS:
        v = row[c]
        out.append(str(v) if isinstance(v, (int, np.integer)) else repr(float(v)))
    return out


def read_metrics(path) -> list[dict]:
    lines = [ln for ln in Path(path).read_text().splitlines() if not ln.startswith("#")]
    rows = []
    for rec in csv.DictReader(lines):
        rows.append({k: (int(v) if k in ("env_steps", "learner_iters", "buffer_trajectories") else float(v))
                     for k, v in rec.items()})
    return rows


@dataclass
class _Rngs:
    init: np.random.Generator
    env: np.random.Generator
    act: np.random.Generator
    replay: np.random.Generator
    learn: np.random.Generator
    eval: np.random.Generator

    @classmethod
    def from_seed(cls, seed: int) -> "_Rngs":
        return cls(*(np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(6)))

    def state(self) -> dict:
        return {k: getattr(self, k).bit_generator.state for k in self.__dataclass_fields__}

    def restore(self, state: dict) -> None:
        for k, s in state.items():
            getattr(self, k).bit_generator.state = s


class Trainer:
    """Runs collection interleaved with learning until ``train.total_env_steps``."""

    def __init__(self, cfg: RunConfig, out_dir=None):
        self.cfg = cfg
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.rngs = _Rngs.from_seed(cfg.train.seed)
        self.env = make_env(env_config(cfg))
        self.buffer = ReplayBuffer(cfg.replay.capacity)
        self.source = GoalSource(self.buffer, self.env)
        self.learner = build_agent(cfg, self.rngs.init)
        self.actor = PolicyActor(self.learner.policy)
        self.env_steps = 0
        self.episodes = 0
        self.rows: list[dict] = []
        self.reports = []
        self._stats: list[dict] = []
        self.timing: list[float] = []
        self._t0 = time.perf_counter()

    # one episode of Algorithm-1 style learning ---------------------------
    def step_episode(self) -> None:
        cfg = self.cfg
        goal, _ = self.source.sample_goal(self.rngs.env)
        traj, positions = collect_episode(self.env, self.actor, goal, self.rngs.act, episode_id=self.episodes)
        self.source.add(traj, positions)
        self.env_steps += traj.length
        self.episodes += 1
        for _ in range(cfg.train.learn_steps_per_episode):
            seqs = self.buffer.sample_sequences(cfg.train.batch_sequences, cfg.train.sequence_len, self.rngs.replay)
            seqs = [relabel(s, cfg.train.relabel_prob, self.rngs.replay, cfg.replay.reward_on_first_arrival)
                    for s in seqs]
            self._stats.append(self.learner.update(seqs, self.rngs.learn))
        if self.episodes % cfg.eval.interval_episodes == 0:
            self.record_row()
        if self.out_dir is not None and self.episodes % cfg.train.checkpoint_interval_episodes == 0:
            self.save_checkpoint(self.out_dir / "checkpoint")

    def record_row(self) -> dict:
        report = evaluate(self.env, self.actor, self.source, self.cfg.eval.episodes, self.rngs.eval,
                          self.cfg.eval.deterministic, self.env_steps, self.cfg.train.seed)
        self.reports.append(report)
        row = {"env_steps": self.env_steps, "learner_iters": self.learner.iterations,
               "median_final_L1": report.median, "mean_final_L1": report.mean,
               "buffer_trajectories": len(self.buffer)}
        for k in _STAT_KEYS:
            vals = [s[k] for s in self._stats]
            row[k] = float(np.mean(vals)) if vals else float("nan")
        self._stats = []
        self.rows.append(row)
        self.timing.append(time.perf_counter() - self._t0)
        if self.out_dir is not None:
            self._append_metrics(row)
        log.info("env_steps=%d median_L1=%.3f q_loss=%.4g", self.env_steps, report.median, row["q_loss"])
        return row

    def run(self, callback=None) -> list[dict]:
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            self.cfg.save(self.out_dir / "config.txt")
            if not (self.out_dir / "metrics.csv").exists():
                self._write_metrics_header()
        while self.env_steps < self.cfg.train.total_env_steps:
            self.step_episode()
            if callback is not None:
                callback(self)
        if self.out_dir is not None:
            self.save_checkpoint(self.out_dir / "final")
            self._write_timing()
        return self.rows

    # outputs ---------------------------------------------------------------
    def _write_metrics_header(self) -> None:
        with open(self.out_dir / "metrics.csv", "w", newline="") as fh:
            fh.write(f"# schema: {METRICS_SCHEMA}\n")
            csv.writer(fh).writerow(METRICS_COLUMNS)

    def _append_metrics(self, row) -> None:
        with open(self.out_dir / "metrics.csv", "a", newline="") as fh:
            csv.writer(fh).writerow(format_row(row))

    def _write_timing(self) -> None:
        with open(self.out_dir / "timing.csv", "w", newline="") as fh:
            fh.write("# schema: reachrl.timing/v1\n")
            w = csv.writer(fh)
            w.writerow(["env_steps", "wall_seconds"])
            for row, t in zip(self.rows, self.timing):
                w.writerow([row["env_steps"], f"{t:.3f}"])

    def save_checkpoint(self, path) -> None:
        """Writes ``path.bin`` (parameters and optimizer moments) and ``path.json`` (counters, RNG).

        The replay buffer and evaluation positions go to ``path.replay/``.
        """
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        state = self.learner.state_dict()
        save_tensors(path.with_suffix(".bin"), state)
        self.buffer.save(path.with_suffix(".replay"))
        save_tensors(path.with_suffix(".replay") / "positions.bin",
                     {str(t.episode_id): self.source.positions_of(t.episode_id) for t in self.buffer})
        meta = {
            "env_steps": self.env_steps,
            "episodes": self.episodes,
            "learner_iters": self.learner.iterations,
            "q_updates": self.learner.q_updates,
            "adam_steps": [self.learner.q_opt.state.step, self.learner.pi_opt.state.step],
            "tau": self.learner.config.mpo.tau,
            "rng": self.rngs.state(),
            "rows": self.rows,
            "pending_stats": self._stats,
            "config": self.cfg.flat(),
        }
        path.with_suffix(".json").write_text(json.dumps(meta, default=_jsonable))

    def load_checkpoint(self, path, full: bool = True) -> None:
        path = Path(path)
        self.learner.load_state_dict(load_tensors(path.with_suffix(".bin")))
        if not full:
            return
        meta = json.loads(path.with_suffix(".json").read_text())
        self.env_steps, self.episodes = meta["env_steps"], meta["episodes"]
        self.learner.iterations, self.learner.q_updates = meta["learner_iters"], meta["q_updates"]
        self.learner.q_opt.state.step, self.learner.pi_opt.state.step = meta["adam_steps"]
        self.learner.config.mpo.tau = meta["tau"]
        self.rngs.restore(meta["rng"])
        self.rows = meta["rows"]
        self._stats = meta["pending_stats"]
        replay_dir = path.with_suffix(".replay")
        if (replay_dir / "replay.json").exists():
            buf = ReplayBuffer.load(replay_dir)
            positions = load_tensors(replay_dir / "positions.bin")
            self.buffer = buf
            self.source = GoalSource(buf, self.env)
            for t in buf:
                self.source._positions[t.episode_id] = positions[str(t.episode_id)]
        if self.out_dir is not None:
            self._write_metrics_header()
            for row in self.rows:
                self._append_metrics(row)


def _jsonable(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    raise TypeError(type(obj))


def train(cfg: RunConfig, out_dir=None) -> Trainer:
    trainer = Trainer(cfg, out_dir)
    trainer.run()
    return trainer
