"""Run configuration: flat ``section.key = value`` files (or a JSON mirror).

Two presets exist. ``desk`` (the default) is sized for a laptop CPU;
``paper`` carries the full-size hyperparameters. A file may start with
``preset = paper`` and then override individual keys.
"""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class EnvSection:
    name: str = "gridworld"
    image_size: int = 16
    horizon: int = 50
    damping: float = 0.9
    force_gain: float = 0.05
    joint_speed: float = 0.15
    grid_n: int = 7
    graph_resolution: int = 10


@dataclass
class AgentSection:
    arch: str = "structured"
    gamma: float = 0.95
    embed_dim: int = 16
    std_floor: float = 0.05
    conv_channels: tuple[int, ...] = (2, 4, 8, 4, 2)
    conv_strides: tuple[int, ...] = (1, 2, 2, 1, 1)
    hidden: tuple[int, ...] = (64, 64)


@dataclass
class TrainSection:
    batch_sequences: int = 16
    sequence_len: int = 8
    relabel_prob: float = 0.5
    lr: float = 5e-4
    target_update_period: int = 8
    learn_steps_per_episode: int = 10
    total_env_steps: int = 50_000
    seed: int = 0
    checkpoint_interval_episodes: int = 100


@dataclass
class MpoSection:
    epsilon: float = 0.2
    tau_init: float = 0.1
    lam: float = 1.0
    n_action_samples: int = 16


@dataclass
class ReplaySection:
    capacity: int = 100_000
    reward_on_first_arrival: bool = True


@dataclass
class EvalSection:
    interval_episodes: int = 20
    episodes: int = 10
    deterministic: bool = False


@dataclass
class RunConfig:
    preset: str = "desk"
    env: EnvSection = field(default_factory=EnvSection)
    agent: AgentSection = field(default_factory=AgentSection)
    train: TrainSection = field(default_factory=TrainSection)
    mpo: MpoSection = field(default_factory=MpoSection)
    replay: ReplaySection = field(default_factory=ReplaySection)
    eval: EvalSection = field(default_factory=EvalSection)

    def flat(self) -> dict[str, object]:
        out: dict[str, object] = {"preset": self.preset}
        for section in SECTIONS:
            for f in dataclasses.fields(getattr(self, section)):
                out[f"{section}.{_external(f.name)}"] = getattr(getattr(self, section), f.name)
        return out

    def to_text(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.flat().items())

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    def replace(self, **dotted) -> "RunConfig":
        """Copy with overrides given as ``section__key=value``."""
        flat = self.flat()
        for k, v in dotted.items():
            flat[k.replace("__", ".", 1)] = v
        return from_mapping(flat)


SECTIONS = ("env", "agent", "train", "mpo", "replay", "eval")

PRESETS: dict[str, dict[str, object]] = {
    "desk": {},
    "paper": {
        "env.image_size": 64,
        "env.horizon": 100,
        "env.name": "point_mass",
        "agent.embed_dim": 128,
        "agent.conv_channels": (8, 16, 32, 16, 8),
        "agent.conv_strides": (1, 2, 2, 2, 2),
        "agent.hidden": (200, 400),
        "train.batch_sequences": 128,
        "train.sequence_len": 32,
        "train.total_env_steps": 2_000_000,
    },
}

# range checks; each returns an error message or None
_CHECKS = {
    "env.image_size": lambda v: v >= 8 or "must be >= 8",
    "env.horizon": lambda v: v >= 2 or "must be >= 2",
    "env.damping": lambda v: 0 < v < 1 or "must lie in (0, 1)",
    "env.force_gain": lambda v: v > 0 or "must be > 0",
    "env.joint_speed": lambda v: v > 0 or "must be > 0",
    "env.grid_n": lambda v: v >= 2 or "must be >= 2",
    "env.graph_resolution": lambda v: v >= 2 or "must be >= 2",
    "env.name": lambda v: v in ("point_mass", "wall_point_mass", "planar_arm", "gridworld") or "unknown environment",
    "agent.arch": lambda v: v in ("unstructured", "shared", "structured") or "unknown architecture",
    "agent.gamma": lambda v: 0 < v < 1 or "must lie in (0, 1)",
    "agent.embed_dim": lambda v: v >= 1 or "must be >= 1",
    "agent.std_floor": lambda v: v > 0 or "must be > 0",
    "agent.conv_channels": lambda v: len(v) >= 1 and min(v) >= 1 or "needs positive channel counts",
    "agent.conv_strides": lambda v: set(v) <= {1, 2} or "strides must be 1 or 2",
    "agent.hidden": lambda v: len(v) >= 1 and min(v) >= 1 or "needs positive widths",
    "train.batch_sequences": lambda v: v >= 1 or "must be >= 1",
    "train.sequence_len": lambda v: v >= 1 or "must be >= 1",
    "train.relabel_prob": lambda v: 0 <= v <= 1 or "must lie in [0, 1]",
    "train.lr": lambda v: v > 0 or "must be > 0",
    "train.target_update_period": lambda v: v >= 1 or "must be >= 1",
    "train.learn_steps_per_episode": lambda v: v >= 0 or "must be >= 0",
    "train.total_env_steps": lambda v: v >= 1 or "must be >= 1",
    "train.seed": lambda v: v >= 0 or "must be >= 0",
    "train.checkpoint_interval_episodes": lambda v: v >= 1 or "must be >= 1",
    "mpo.epsilon": lambda v: v > 0 or "must be > 0",
    "mpo.tau_init": lambda v: v > 0 or "must be > 0",
    "mpo.lambda": lambda v: v >= 0 or "must be >= 0",
    "mpo.n_action_samples": lambda v: v >= 2 or "must be >= 2",
    "replay.capacity": lambda v: v >= 1 or "must be >= 1",
    "eval.interval_episodes": lambda v: v >= 1 or "must be >= 1",
    "eval.episodes": lambda v: v >= 1 or "must be >= 1",
}


def _external(name: str) -> str:
    return "lambda" if name == "lam" else name


def _internal(name: str) -> str:
    return "lam" if name == "lambda" else name


def _format(v) -> str:
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(raw, typ, key):
    try:
        if typ is bool:
            if isinstance(raw, bool):
                return raw
            s = str(raw).strip().lower()
            if s not in ("true", "false", "1", "0"):
                raise ValueError(raw)
            return s in ("true", "1")
        if typ is int:
            if isinstance(raw, float) and not raw.is_integer():
                raise ValueError(raw)
            return int(float(raw)) if isinstance(raw, str) and "e" in raw.lower() else int(raw)
        if typ is float:
            return float(raw)
        if typ is str:
            return str(raw).strip()
        if typing.get_origin(typ) is tuple:
            items = raw if isinstance(raw, (list, tuple)) else [x for x in str(raw).split(",") if x.strip()]
            return tuple(int(x) for x in items)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot parse {raw!r} as {getattr(typ, '__name__', typ)}") from None
    raise ConfigError(f"{key}: unsupported type")


def from_mapping(values: dict[str, object]) -> RunConfig:
    values = dict(values)
    preset = str(values.pop("preset", "desk"))
    if preset not in PRESETS:
        raise ConfigError(f"preset: unknown preset {preset!r}")
    merged = {**PRESETS[preset], **values}
    cfg = RunConfig(preset=preset)
    for key, raw in merged.items():
        if "." not in key:
            raise ConfigError(f"{key}: unknown key")
        section, name = key.split(".", 1)
        if section not in SECTIONS:
            raise ConfigError(f"{key}: unknown section")
        obj = getattr(cfg, section)
        hints = typing.get_type_hints(type(obj))
        attr = _internal(name)
        if attr not in hints:
            raise ConfigError(f"{key}: unknown key")
        value = _parse(raw, hints[attr], key)
        check = _CHECKS.get(key)
        if check is not None:
            verdict = check(value)
            if verdict is not True:
                raise ConfigError(f"{key}: {verdict} (got {value!r})")
        setattr(obj, attr, value)
    if len(cfg.agent.conv_channels) != len(cfg.agent.conv_strides):
        raise ConfigError("agent.conv_channels: length must match agent.conv_strides")
    if cfg.env.name == "gridworld" and cfg.env.grid_n > cfg.env.image_size:
        raise ConfigError("env.grid_n: must not exceed env.image_size")
    return cfg


def parse_text(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        k, v = line.split("=", 1)
        k = k.strip()
        if k in out:
            raise ConfigError(f"{k}: duplicate key")
        out[k] = v.strip()
    return out


def load_config(path) -> RunConfig:
    p = Path(path)
    text = p.read_text()
    if p.suffix == ".json":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON ({exc})") from None
        return from_mapping(_flatten_json(data))
    return from_mapping(parse_text(text))


def _flatten_json(data, prefix="") -> dict[str, object]:
    out = {}
    for k, v in data.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten_json(v, key + "."))
        else:
            out[key] = v
    return out
