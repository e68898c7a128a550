"""Retrace critic fitting and MPO policy improvement for goal-conditioned agents."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, NumericalError, Tape
from .nets import (
    GaussianPolicy,
    GoalConditionedQ,
    gaussian_kl_t,
    gaussian_log_prob,
    gaussian_log_prob_t,
    sample_actions,
)
from .replay import SequenceSample

TAU_BOUNDS = (1e-6, 1e3)


@dataclass
class MpoState:
    epsilon: float = 0.2
    tau: float = 0.1
    lam: float = 1.0
    n_samples: int = 16

    def __post_init__(self):
        if self.tau <= 0 or self.epsilon <= 0:
            raise ValueError("MPO temperature and epsilon must be positive")
        if self.n_samples < 2:
            raise ValueError("MPO needs at least two action samples")


@dataclass
class PaddedBatch:
    """Sequences padded to a common length with a loss mask."""

    observations: np.ndarray  # (B, H+1, W, W)
    actions: np.ndarray  # (B, H, A)
    rewards: np.ndarray  # (B, H)
    log_behavior: np.ndarray  # (B, H)
    goals: np.ndarray  # (B, W, W)
    mask: np.ndarray  # (B, H)
    at_goal: np.ndarray  # (B, H+1)
    relabeled: np.ndarray  # (B,)

    @property
    def shape(self):
        return self.actions.shape[:2]


def collate(samples: Sequence[SequenceSample]) -> PaddedBatch:
    if any(s.log_behavior is None for s in samples):
        raise ValueError("retrace needs behavior log-densities for every sequence")
    h = max(s.length for s in samples)
    b = len(samples)
    w = samples[0].goal.shape
    a_dim = samples[0].actions.shape[1]
    obs = np.zeros((b, h + 1, *w))
    act = np.zeros((b, h, a_dim))
    rew = np.zeros((b, h))
    logb = np.zeros((b, h))
    mask = np.zeros((b, h))
    for i, s in enumerate(samples):
        n = s.length
        obs[i, : n + 1] = s.observations
        obs[i, n + 1 :] = s.observations[-1]
        act[i, :n] = s.actions
        rew[i, :n] = s.rewards
        logb[i, :n] = s.log_behavior
        m = s.mask.copy()
        hits = np.flatnonzero(s.rewards * m)
        if len(hits):
            m[hits[0] + 1 :] = 0.0
        mask[i, :n] = m
    goals = np.stack([s.goal for s in samples])
    at_goal = np.all(obs == goals[:, None], axis=(2, 3))
    return PaddedBatch(obs, act, rew, logb, goals, mask, at_goal, np.array([s.relabeled for s in samples]))


def retrace_returns(q_taken, v_next, rewards, traces, mask, gamma: float, at_goal=None) -> np.ndarray:
    """Retrace targets for (B, H) arrays.

    ``q_taken[s]`` is the target critic at (o_s, a_s), ``v_next[s]`` the
    policy expectation at o_{s+1}, ``traces[s]`` the truncated ratio c_s.
    Bootstrapping stops after a rewarded transition and from a state that
    already shows the goal. Masked steps get target 0.
    """
    q_taken, v_next, rewards, traces, mask = (np.asarray(x, float) for x in (q_taken, v_next, rewards, traces, mask))
    b, h = q_taken.shape
    cont = 1.0 - rewards
    if at_goal is not None:
        cont = cont * (1.0 - np.asarray(at_goal, float)[:, :h])
    out = np.zeros((b, h))
    carry = np.zeros(b)  # c_{s+1} * (Q^ret_{s+1} - Q'(o_{s+1}, a_{s+1})), zero past the last valid step
    for s in range(h - 1, -1, -1):
        ret = rewards[:, s] + gamma * cont[:, s] * (v_next[:, s] + carry)
        ret = ret * mask[:, s]
        out[:, s] = ret
        carry = mask[:, s] * traces[:, s] * (ret - q_taken[:, s])
    return out


def truncated_traces(log_pi, log_b) -> np.ndarray:
    return np.minimum(1.0, np.exp(np.minimum(np.asarray(log_pi) - np.asarray(log_b), 0.0)))


# --- E-step -------------------------------------------------------------------


def _weights(q: np.ndarray, tau: float) -> tuple[np.ndarray, np.ndarray]:
    """Softmax weights and per-row log mean exp(q / tau)."""
    x = q / tau
    mx = x.max(axis=1, keepdims=True)
    e = np.exp(x - mx)
    s = e.sum(axis=1, keepdims=True)
    lme = (mx + np.log(s / q.shape[1]))[:, 0]
    return e / s, lme


def sample_kl(weights: np.ndarray) -> float:
    """Mean KL(q || pi) when pi is represented by its own uniform-weighted samples."""
    w = np.asarray(weights)
    n = w.shape[1]
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(w > 0, w * np.log(w * n), 0.0)
    return float(terms.sum(axis=1).mean())


def temperature_dual(q: np.ndarray, tau: float, epsilon: float) -> float:
    _, lme = _weights(q, tau)
    return tau * epsilon + tau * float(lme.mean())


def solve_temperature(q_values, epsilon: float, max_iter: int = 100, tol: float = 1e-12) -> float:
    """Minimize the convex temperature dual by bisection on its derivative in log-tau."""
    q = np.atleast_2d(np.asarray(q_values, float))

    def slope(log_tau):
        w, _ = _weights(q, math.exp(log_tau))
        return epsilon - sample_kl(w)

    lo, hi = math.log(TAU_BOUNDS[0]), math.log(TAU_BOUNDS[1])
    if slope(lo) >= 0:
        return TAU_BOUNDS[0]
    if slope(hi) <= 0:
        return TAU_BOUNDS[1]
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        f = slope(mid)
        if abs(f) < tol or hi - lo < tol:
            return math.exp(mid)
        if f > 0:
            hi = mid
        else:
            lo = mid
    raise NumericalError("temperature bisection did not converge")


def estep_weights(q_values, epsilon: float) -> tuple[np.ndarray, float]:
    """Per-row weights softmax(Q/tau*) over sampled actions and the solved tau*."""
    q = np.atleast_2d(np.asarray(q_values, float))
    tau = solve_temperature(q, epsilon)
    w, _ = _weights(q, tau)
    return w, tau


def estep(observations, goals, policy: GaussianPolicy, q: GoalConditionedQ, state: MpoState, rng):
    """Sample ``state.n_samples`` actions per (o, o_g), score them with ``q`` and reweight.

    Returns (actions (n, N, A), weights (n, N), tau*).
    """
    mean, std = policy.dist(observations, goals)
    acts = sample_actions(mean, std, rng, state.n_samples).transpose(1, 0, 2)
    n, k, a_dim = acts.shape
    z = np.repeat(q.embed(observations).value, k, axis=0)
    zg = np.repeat(q.embed_goal(goals).value, k, axis=0)
    values = q.from_embeddings(z, acts.reshape(n * k, a_dim), zg).value.reshape(n, k)
    w, tau = estep_weights(values, state.epsilon)
    state.tau = tau
    return acts, w, tau


# --- M-step and critic step ---------------------------------------------------


def mstep_objective(policy, z_o, z_g, actions, weights, old_mean, old_std, lam):
    """Weighted log-likelihood minus lam * KL(old || new), averaged over observations."""
    mean, std = policy.from_embeddings(z_o, z_g)
    n, k, a_dim = actions.shape
    rep = np.repeat(np.arange(n), k)
    logp = gaussian_log_prob_t(mean[rep], std[rep], actions.reshape(n * k, a_dim))
    ll = ad.reduce_sum(logp * weights.reshape(-1)) * (1.0 / n)
    if lam == 0:
        return ll
    kl = ad.reduce_mean(gaussian_kl_t(old_mean, old_std, mean, std))
    return ll - kl * lam


def mstep(policy: GaussianPolicy, optimizer: Adam, observations, goals, actions, weights, lam: float,
          old=None) -> float:
    """One Adam step on the KL-penalized weighted maximum likelihood; returns the objective."""
    weights = np.asarray(weights, float)
    if not np.allclose(weights.sum(axis=1), 1.0):
        raise ValueError("mstep: weights must be normalized per observation")
    if old is None:
        old = policy.dist(observations, goals)
    params = list(policy.params().values())
    with Tape() as tape:
        obj = mstep_objective(policy, policy.encoder(observations), policy.encoder(goals),
                              np.asarray(actions, float), weights, old[0], old[1], lam)
        loss = obj * -1.0
    if not np.isfinite(obj.value):
        raise NumericalError("mstep: non-finite objective")
    optimizer.step(tape.gradient(loss, params))
    return float(obj.value)


def q_regression_loss(q: GoalConditionedQ, observations, actions, goals, targets, mask):
    values = q(observations, actions, goals)
    mask = np.asarray(mask, float)
    diff = values - np.asarray(targets, float)
    return ad.reduce_sum(ad.square(diff) * mask) * (1.0 / max(mask.sum(), 1.0))


@dataclass
class LearnerConfig:
    gamma: float = 0.95
    lr: float = 5e-4
    target_update_period: int = 8
    mpo: MpoState = field(default_factory=MpoState)


class Learner:
    """Owns the online critic, its target snapshot, the policy and both optimizers."""

    def __init__(self, q: GoalConditionedQ, q_target: GoalConditionedQ, policy: GaussianPolicy,
                 config: LearnerConfig):
        self.q, self.q_target, self.policy, self.config = q, q_target, policy, config
        self.q_target.copy_from(q)
        self.q_params = list(q.params().values())
        self.pi_params = list(policy.params().values())
        self.q_opt = Adam(self.q_params, lr=config.lr)
        self.pi_opt = Adam(self.pi_params, lr=config.lr)
        self.q_updates = 0
        self.iterations = 0

    # targets -------------------------------------------------------------
    def evaluate(self, batch: PaddedBatch, rng):
        """Target-critic values and policy samples shared by Retrace and the E-step."""
        b, h = batch.shape
        w = batch.observations.shape[2:]
        k = self.config.mpo.n_samples
        obs = batch.observations.reshape(b * (h + 1), *w)
        zq = self.q_target.embed(obs).value
        zg = self.q_target.embed_goal(batch.goals).value
        zp = self.policy.encoder(obs).value
        zpg = self.policy.encoder(batch.goals).value
        goal_rows = np.repeat(np.arange(b), h + 1)
        mean, std = self.policy.from_embeddings(zp, zpg[goal_rows])
        mean, std = mean.value, std.value
        samples = sample_actions(mean, std, rng, k).transpose(1, 0, 2)  # (rows, k, A)
        rows = b * (h + 1)
        a_dim = samples.shape[-1]
        q_samples = self.q_target.from_embeddings(
            np.repeat(zq, k, axis=0), samples.reshape(rows * k, a_dim), np.repeat(zg[goal_rows], k, axis=0)
        ).value.reshape(b, h + 1, k)
        zq_taken = zq.reshape(b, h + 1, -1)[:, :h].reshape(b * h, -1)
        q_taken = self.q_target.from_embeddings(
            zq_taken, batch.actions.reshape(b * h, a_dim), np.repeat(zg, h, axis=0)
        ).value.reshape(b, h)
        mean = mean.reshape(b, h + 1, a_dim)
        std = std.reshape(b, h + 1, a_dim)
        log_pi = gaussian_log_prob(mean[:, :h], std[:, :h], batch.actions)
        return {
            "samples": samples.reshape(b, h + 1, k, a_dim),
            "q_samples": q_samples,
            "q_taken": q_taken,
            "log_pi": log_pi,
            "mean": mean,
            "std": std,
            "z_policy": zp.reshape(b, h + 1, -1),
            "z_policy_goal": zpg,
        }

    def retrace_targets(self, batch: PaddedBatch, ev) -> tuple[np.ndarray, np.ndarray]:
        traces = truncated_traces(ev["log_pi"], batch.log_behavior)
        v_next = ev["q_samples"][:, 1:].mean(axis=2)
        targets = retrace_returns(ev["q_taken"], v_next, batch.rewards, traces, batch.mask,
                                  self.config.gamma, batch.at_goal)
        return targets, traces

    # updates -------------------------------------------------------------
    def q_update(self, batch: PaddedBatch, targets: np.ndarray) -> float:
        if not np.all(np.isfinite(targets)):
            raise NumericalError("q_update: non-finite targets")
        b, h = batch.shape
        # a step that starts on the goal is never bootstrapped from, so the critic skips it
        sel = (batch.mask * (1.0 - batch.at_goal[:, :h])).reshape(-1) > 0
        w = batch.observations.shape[2:]
        obs = batch.observations[:, :h].reshape(b * h, *w)[sel]
        goals = np.repeat(batch.goals, h, axis=0)[sel]
        acts = batch.actions.reshape(b * h, -1)[sel]
        with Tape() as tape:
            loss = q_regression_loss(self.q, obs, acts, goals, targets.reshape(-1)[sel], np.ones(sel.sum()))
        if not np.isfinite(loss.value):
            raise NumericalError("q_update: non-finite loss")
        self.q_opt.step(tape.gradient(loss, self.q_params))
        self.q_updates += 1
        if self.q_updates % self.config.target_update_period == 0:
            self.sync_target()
        return float(loss.value)

    def sync_target(self) -> None:
        self.q_target.copy_from(self.q)

    def policy_update(self, batch: PaddedBatch, ev) -> dict:
        mpo = self.config.mpo
        b, h = batch.shape
        sel = batch.mask.reshape(-1) > 0
        k = mpo.n_samples
        q_vals = ev["q_samples"][:, :h].reshape(b * h, k)[sel]
        acts = ev["samples"][:, :h].reshape(b * h, k, -1)[sel]
        weights, tau = estep_weights(q_vals, mpo.epsilon)
        mpo.tau = tau
        w = batch.observations.shape[2:]
        obs = batch.observations[:, :h].reshape(b * h, *w)[sel]
        goals = np.repeat(batch.goals, h, axis=0)[sel]
        old = (ev["mean"][:, :h].reshape(b * h, -1)[sel], ev["std"][:, :h].reshape(b * h, -1)[sel])
        obj = mstep(self.policy, self.pi_opt, obs, goals, acts, weights, mpo.lam, old=old)
        return {"tau_star": tau, "estep_kl": sample_kl(weights), "mstep_objective": obj}

    def update(self, samples: Sequence[SequenceSample], rng) -> dict:
        """One learning iteration: Retrace critic step, then E-step and M-step."""
        batch = collate(samples)
        ev = self.evaluate(batch, rng)
        targets, _ = self.retrace_targets(batch, ev)
        loss = self.q_update(batch, targets)
        stats = self.policy_update(batch, ev)
        self.iterations += 1
        valid = batch.mask > 0
        stats.update(q_loss=loss, mean_qret=float(targets[valid].mean()),
                     relabel_fraction=float(batch.relabeled.mean()))
        return stats

    # persistence ---------------------------------------------------------
    def state_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, mod in (("q", self.q), ("q_target", self.q_target), ("policy", self.policy)):
            out.update({f"{prefix}.{k}": v for k, v in mod.state_dict().items()})
        for prefix, opt in (("opt.q", self.q_opt), ("opt.policy", self.pi_opt)):
            for i, (m, v) in enumerate(zip(opt.state.m, opt.state.v)):
                out[f"{prefix}.m.{i}"] = m.copy()
                out[f"{prefix}.v.{i}"] = v.copy()
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for prefix, mod in (("q", self.q), ("q_target", self.q_target), ("policy", self.policy)):
            n = len(prefix) + 1
            mod.load_state_dict({k[n:]: v for k, v in state.items() if k.startswith(prefix + ".")})
        for prefix, opt in (("opt.q", self.q_opt), ("opt.policy", self.pi_opt)):
            for i, (m, v) in enumerate(zip(opt.state.m, opt.state.v)):
                if f"{prefix}.m.{i}" in state:
                    m[...] = state[f"{prefix}.m.{i}"]
                    v[...] = state[f"{prefix}.v.{i}"]
