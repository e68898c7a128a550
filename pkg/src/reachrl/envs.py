"""Deterministic toy environments rendered to small binary images.

Point masses live in the unit square, the planar arm in joint-angle space,
and the gridworld on an N x N lattice. Rendering is a pure function of
position; velocity is never drawn.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass

import numpy as np

ENV_NAMES = ("point_mass", "wall_point_mass", "planar_arm", "gridworld")

# x-interval and y-interval of the wall rectangle; the gap is at the top (y > 0.75)
WALL = (0.475, 0.525, 0.0, 0.75)

GRID_DEAD_ZONE = 1.0 / 3.0
# gridworld action vectors in (x, y) order: stay, up, down, left, right
GRID_ACTIONS = np.array([[0.0, 0.0], [0.0, -1.0], [0.0, 1.0], [-1.0, 0.0], [1.0, 0.0]])
COMPASS = np.array(
    [[0.0, 0.0], [1, 0], [1, 1], [0, 1], [-1, 1], [-1, 0], [-1, -1], [0, -1], [1, -1]], dtype=float
)


@dataclass(frozen=True)
class EnvConfig:
    name: str = "gridworld"
    image_size: int = 16
    horizon: int = 50
    damping: float = 0.9
    force_gain: float = 0.05
    joint_speed: float = 0.15
    grid_n: int = 7

    def __post_init__(self):
        if self.name not in ENV_NAMES:
            raise ValueError(f"env.name: unknown environment {self.name!r}")
        if self.image_size < 8:
            raise ValueError("env.image_size must be >= 8")
        if self.horizon < 2:
            raise ValueError("env.horizon must be >= 2")
        if not 0.0 < self.damping < 1.0:
            raise ValueError("env.damping must lie in (0, 1)")
        if self.force_gain <= 0:
            raise ValueError("env.force_gain must be > 0")
        if self.joint_speed <= 0:
            raise ValueError("env.joint_speed must be > 0")
        if self.name == "gridworld" and not 2 <= self.grid_n <= self.image_size:
            raise ValueError("env.grid_n must lie in [2, image_size]")

    @property
    def action_dim(self) -> int:
        return 2

    @property
    def position_dim(self) -> int:
        return 2


@dataclass(frozen=True)
class EnvState:
    position: tuple[float, float]
    velocity: tuple[float, float] = (0.0, 0.0)


@dataclass
class EnvGraph:
    positions: np.ndarray  # (n, 2)
    observations: np.ndarray  # (n, W, W)
    successors: np.ndarray  # (n, n_actions) node index
    actions: np.ndarray  # (n_actions, 2) continuous action per discrete index
    macro_steps: int = 1  # env steps per graph edge

    @property
    def n_nodes(self) -> int:
        return len(self.positions)

    @property
    def n_actions(self) -> int:
        return len(self.actions)

    def to_json(self) -> dict:
        return {
            "nodes": [
                {"id": i, "position": [float(v) for v in p], "observation_digest": observation_digest(o)}
                for i, (p, o) in enumerate(zip(self.positions, self.observations))
            ],
            "edges": [
                {"src": s, "action": a, "dst": int(self.successors[s, a])}
                for s in range(self.n_nodes)
                for a in range(self.n_actions)
            ],
            "actions": self.actions.tolist(),
            "macro_steps": self.macro_steps,
        }

    def dump(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=1)


def observation_digest(obs: np.ndarray) -> str:
    return hashlib.sha1(np.ascontiguousarray(obs, dtype="<f8").tobytes()).hexdigest()[:16]


def in_wall(x: float, y: float) -> bool:
    x0, x1, y0, y1 = WALL
    return x0 < x < x1 and y0 <= y < y1


def _segment_hits_wall(p, q) -> tuple[float, int] | None:
    """Slab test: entry fraction along p->q into the wall and the axis of the face hit."""
    x0, x1, y0, y1 = WALL
    t_enter, t_exit, axis = -math.inf, math.inf, -1
    for k, (lo, hi) in enumerate(((x0, x1), (y0, y1))):
        d = q[k] - p[k]
        if d == 0.0:
            # same closure as in_wall: open in x, closed at the floor in y
            inside = lo < p[k] < hi if k == 0 else lo <= p[k] < hi
            if not inside:
                return None
            continue
        ta, tb = sorted(((lo - p[k]) / d, (hi - p[k]) / d))
        if ta > t_enter:
            t_enter, axis = ta, k
        t_exit = min(t_exit, tb)
    if t_enter >= t_exit or t_exit <= 0.0 or t_enter >= 1.0 or t_enter < 0.0:
        return None
    return t_enter, axis


class Env:
    """A single environment instance; cheap to copy, not shared across threads."""

    def __init__(self, config: EnvConfig):
        self.config = config
        self._frame = np.zeros((config.image_size, config.image_size))
        if config.name == "wall_point_mass":
            self._frame = _wall_mask(config.image_size)

    # learner-facing
    def reset(self, rng: np.random.Generator) -> tuple[EnvState, np.ndarray]:
        c = self.config
        if c.name == "gridworld":
            state = EnvState((float(rng.integers(c.grid_n)), float(rng.integers(c.grid_n))))
        elif c.name == "planar_arm":
            state = EnvState(tuple(float(v) for v in rng.uniform(-math.pi, math.pi, size=2)))
        else:
            while True:
                x, y = rng.uniform(0.0, 1.0, size=2)
                if c.name != "wall_point_mass" or not in_wall(x, y):
                    break
            state = EnvState((float(x), float(y)))
        return state, self.render(state)

    def step(self, state: EnvState, action) -> tuple[EnvState, np.ndarray]:
        a = np.asarray(action, dtype=float)
        if a.shape != (2,):
            raise ValueError(f"step: action shape {a.shape} != (2,)")
        if not np.all(np.isfinite(a)):
            raise ValueError("step: non-finite action")
        a = np.clip(a, -1.0, 1.0)
        name = self.config.name
        if name == "gridworld":
            nxt = self._grid_step(state, a)
        elif name == "planar_arm":
            nxt = self._arm_step(state, a)
        else:
            nxt = self._mass_step(state, a)
        return nxt, self.render(nxt)

    def render(self, state: EnvState) -> np.ndarray:
        c = self.config
        if c.name == "gridworld":
            return render_grid_cell(int(state.position[0]), int(state.position[1]), c.grid_n, c.image_size)
        if c.name == "planar_arm":
            return render_arm(state.position, c.image_size)
        img = self._frame.copy()
        img[render_disc(state.position, c.image_size) > 0] = 1.0
        return img

    # evaluation-only
    @staticmethod
    def eval_position(state: EnvState) -> np.ndarray:
        return np.array(state.position, dtype=float)

    def position_distance(self, p, q) -> float:
        """L1 distance in position space; joint angles are compared modulo 2*pi."""
        d = np.abs(np.asarray(p, float) - np.asarray(q, float))
        if self.config.name == "planar_arm":
            d = np.minimum(d, 2 * math.pi - d)
        return float(d.sum())

    # dynamics
    def _grid_step(self, state, a):
        n = self.config.grid_n
        i, j = int(state.position[0]), int(state.position[1])
        ax, ay = a
        if max(abs(ax), abs(ay)) >= GRID_DEAD_ZONE:
            if abs(ax) >= abs(ay):
                j += 1 if ax > 0 else -1
            else:
                i += 1 if ay > 0 else -1
        i, j = min(max(i, 0), n - 1), min(max(j, 0), n - 1)
        return EnvState((float(i), float(j)))

    def _arm_step(self, state, a):
        th = np.array(state.position) + self.config.joint_speed * a
        th = (th + math.pi) % (2 * math.pi) - math.pi
        return EnvState(tuple(float(v) for v in th), tuple(float(v) for v in self.config.joint_speed * a))

    def _mass_step(self, state, a):
        c = self.config
        p = np.array(state.position)
        v = c.damping * np.array(state.velocity) + c.force_gain * a
        q = p + v
        for k in range(2):
            if q[k] < 0.0 or q[k] > 1.0:
                q[k] = min(max(q[k], 0.0), 1.0)
                v[k] = 0.0
        # collide with the wall along the (arena-clipped) segment
        if c.name == "wall_point_mass":
            hit = _segment_hits_wall(p, q)
            if hit is not None:
                t, axis = hit
                q = p + t * (q - p)
                # land exactly on the face that was hit
                x0, x1, y0, y1 = WALL
                if axis == 0:
                    q[0] = x0 if v[0] > 0 else x1
                elif axis == 1:
                    q[1] = y1
                v[max(axis, 0)] = 0.0
        return EnvState((float(q[0]), float(q[1])), (float(v[0]), float(v[1])))


def make_env(config: EnvConfig) -> Env:
    return Env(config)


# --- rasterization ------------------------------------------------------------


def render_grid_cell(i: int, j: int, n: int, w: int) -> np.ndarray:
    img = np.zeros((w, w))
    img[i * w // n : (i + 1) * w // n, j * w // n : (j + 1) * w // n] = 1.0
    return img


def render_disc(position, w: int) -> np.ndarray:
    radius = max(1.0, w / 16)
    cx, cy = position[0] * w, position[1] * w
    centers = np.arange(w) + 0.5
    dx = centers[None, :] - cx
    dy = centers[:, None] - cy
    return ((dx * dx + dy * dy) <= radius * radius).astype(float)


def _wall_mask(w: int) -> np.ndarray:
    x0, x1, y0, y1 = WALL
    img = np.zeros((w, w))
    c0, c1 = int(math.floor(x0 * w)), int(math.ceil(x1 * w))
    r0, r1 = int(math.floor(y0 * w)), int(math.ceil(y1 * w))
    img[r0:r1, c0:c1] = 1.0
    return img


ARM_LINKS = (0.22, 0.2)


def arm_joints(theta, w: int) -> np.ndarray:
    base = np.array([0.5, 0.5])
    t1, t2 = theta
    elbow = base + ARM_LINKS[0] * np.array([math.cos(t1), math.sin(t1)])
    tip = elbow + ARM_LINKS[1] * np.array([math.cos(t1 + t2), math.sin(t1 + t2)])
    return np.stack([base, elbow, tip]) * w


def render_arm(theta, w: int) -> np.ndarray:
    img = np.zeros((w, w))
    pts = arm_joints(theta, w)
    for a, b in ((pts[0], pts[1]), (pts[1], pts[2])):
        n = int(np.ceil(np.abs(b - a).max() * 4)) + 1
        for s in np.linspace(0.0, 1.0, n):
            x, y = a + s * (b - a)
            c, r = min(int(x), w - 1), min(int(y), w - 1)
            img[r, c] = 1.0
    return img


# --- discretization -----------------------------------------------------------


def discretize(config: EnvConfig, resolution: int = 10) -> EnvGraph:
    """Transition graph over zero-velocity nodes.

    The gridworld graph is exact. For continuous environments each edge holds one
    of 8 compass forces (or none) for the fewest env steps that move a resting
    agent at least 3/4 of the node spacing, then snaps to the nearest node that
    is reachable without crossing the wall.
    """
    if resolution < 2:
        raise ValueError("discretize: resolution must be >= 2")
    env = Env(config)
    if config.name == "gridworld":
        return _grid_graph(env)
    g = resolution
    if config.name == "planar_arm":
        spacing = 2 * math.pi / g
        ticks = -math.pi + (np.arange(g) + 0.5) * spacing
        per_step = config.joint_speed
        disp = lambda k: per_step * k  # noqa: E731
    else:
        spacing = 1.0 / g
        ticks = (np.arange(g) + 0.5) * spacing
        b, kappa = config.damping, config.force_gain
        disp = lambda k: kappa * sum((1 - b**j) / (1 - b) for j in range(1, k + 1))  # noqa: E731
    macro = 1
    while disp(macro) < 0.75 * spacing:
        macro += 1
    positions = np.array([(x, y) for y in ticks for x in ticks])
    if config.name == "wall_point_mass":
        positions = np.array([p for p in positions if not in_wall(*p)])
    observations = np.stack([env.render(EnvState(tuple(p))) for p in positions])
    succ = np.zeros((len(positions), len(COMPASS)), dtype=int)
    for s, p in enumerate(positions):
        for ai, a in enumerate(COMPASS):
            state = EnvState(tuple(p))
            for _ in range(macro):
                state, _ = env.step(state, a)
            succ[s, ai] = _snap(config, positions, p, np.array(state.position))
    return EnvGraph(positions, observations, succ, COMPASS.copy(), macro)


def _snap(config, positions, src, end) -> int:
    if config.name == "planar_arm":
        d = np.abs(positions - end)
        d = np.minimum(d, 2 * math.pi - d)
        return int(np.argmin((d**2).sum(axis=1)))
    order = np.argsort(((positions - end) ** 2).sum(axis=1), kind="stable")
    if config.name != "wall_point_mass":
        return int(order[0])
    for idx in order:
        node = positions[idx]
        if segment_crosses_wall(end, node) or segment_crosses_wall(src, node):
            continue
        return int(idx)
    raise RuntimeError("discretize: no wall-free snap target")


def segment_crosses_wall(p, q, samples: int = 200) -> bool:
    p, q = np.asarray(p, float), np.asarray(q, float)
    pts = p + np.linspace(0.0, 1.0, samples)[:, None] * (q - p)
    x0, x1, y0, y1 = WALL
    x, y = pts[:, 0], pts[:, 1]
    return bool(np.any((x0 < x) & (x < x1) & (y0 <= y) & (y < y1)))


def _grid_graph(env: Env) -> EnvGraph:
    n = env.config.grid_n
    positions = np.array([(i, j) for i in range(n) for j in range(n)], dtype=float)
    observations = np.stack([env.render(EnvState(tuple(p))) for p in positions])
    succ = np.zeros((n * n, len(GRID_ACTIONS)), dtype=int)
    for s, p in enumerate(positions):
        for ai, a in enumerate(GRID_ACTIONS):
            nxt, _ = env.step(EnvState(tuple(p)), a)
            i, j = nxt.position
            succ[s, ai] = int(i) * n + int(j)
    return EnvGraph(positions, observations, succ, GRID_ACTIONS.copy(), 1)
