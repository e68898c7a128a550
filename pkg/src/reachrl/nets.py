"""Goal-conditioned critics, the shared convolutional encoder and the Gaussian policy."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

ARCHITECTURES = ("unstructured", "shared", "structured")
LOG_2PI = math.log(2.0 * math.pi)
# largest latent distance fed to gamma**d; beyond it the value is flat
MAX_EXPONENT = 60.0


@dataclass(frozen=True)
class NetConfig:
    image_size: int = 16
    action_dim: int = 2
    embed_dim: int = 16
    conv_channels: tuple[int, ...] = (2, 4, 8, 4, 2)
    conv_strides: tuple[int, ...] = (1, 2, 2, 1, 1)
    hidden: tuple[int, ...] = (200, 400)
    gamma: float = 0.95
    std_floor: float = 0.05

    @property
    def conv_output_size(self) -> int:
        side = self.image_size
        for s in self.conv_strides:
            side = (side - 1) // s + 1
        return self.conv_channels[-1] * side * side


class Module:
    """Holds named parameter tensors and child modules."""

    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                out[name] = value
            elif isinstance(value, Module):
                out.update({f"{name}.{k}": v for k, v in value.params().items()})
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update({f"{name}.{i}.{k}": v for k, v in item.params().items()})
        # a tied module appears under several names; keep the first
        seen, unique = set(), {}
        for k, v in out.items():
            if id(v) not in seen:
                seen.add(id(v))
                unique[k] = v
        return unique

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.value.copy() for k, v in self.params().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.params()
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"checkpoint lacks parameters {sorted(missing)[:5]}")
        for k, p in params.items():
            if state[k].shape != p.shape:
                raise ad.ShapeError(f"parameter {k}: checkpoint shape {state[k].shape} != model shape {p.shape}")
            p.value[...] = state[k]

    def copy_from(self, other: "Module") -> None:
        self.load_state_dict(other.state_dict())


class Dense(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        bound = 1.0 / math.sqrt(n_in)
        self.w = Tensor.param(rng.uniform(-bound, bound, size=(n_in, n_out)))
        self.b = Tensor.param(np.zeros(n_out))

    def __call__(self, x):
        return ad.matmul(x, self.w) + self.b


class MLP(Module):
    """Dense layers with ReLU between them; the last layer is linear."""

    def __init__(self, sizes, rng):
        self.layers = [Dense(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])]

    def __call__(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = ad.relu(x)
        return x


class Conv(Module):
    def __init__(self, c_in, c_out, stride, rng, k=3):
        scale = math.sqrt(2.0 / (c_in * k * k))
        self.w = Tensor.param(rng.normal(0.0, scale, size=(k, k, c_in, c_out)))
        self.b = Tensor.param(np.zeros(c_out))
        self.stride = stride

    def __call__(self, x):
        return ad.conv2d(x, self.w, self.stride) + self.b


class Encoder(Module):
    """Convolution stack (3x3 kernels, ReLU) followed by a dense map to the embedding."""

    def __init__(self, cfg: NetConfig, rng):
        if len(cfg.conv_channels) != len(cfg.conv_strides):
            raise ValueError("conv_channels and conv_strides must have equal length")
        c_in = 1
        self.convs = []
        for c, s in zip(cfg.conv_channels, cfg.conv_strides):
            self.convs.append(Conv(c_in, c, s, rng))
            c_in = c
        self.out = Dense(cfg.conv_output_size, cfg.embed_dim, rng)
        self.image_size = cfg.image_size

    def __call__(self, images) -> Tensor:
        x = images.value if isinstance(images, Tensor) else np.asarray(images, dtype=float)
        w = self.image_size
        if x.ndim == 2:
            x = x[None]
        if x.shape[1:] != (w, w):
            raise ad.ShapeError(f"encode: observation shape {x.shape[1:]} != ({w}, {w})")
        n = len(x)
        # repeated frames are common (gridworld has N*N distinct images): encode each once
        uniq, inverse = _dedupe(x.reshape(n, -1))
        h = Tensor(uniq.reshape(len(uniq), w, w, 1))
        for conv in self.convs:
            h = ad.relu(conv(h))
        z = self.out(ad.reshape(h, (len(uniq), -1)))
        return z if inverse is None else ad.take(z, inverse.reshape(-1))


def executed(actions) -> np.ndarray:
    """The action the environment applies; the critic never sees out-of-range values."""
    return np.clip(actions.value if isinstance(actions, Tensor) else np.asarray(actions, float), -1.0, 1.0)


def _dedupe(rows: np.ndarray) -> tuple[np.ndarray, np.ndarray | None]:
    """Unique rows in first-appearance order and the gather index, or (rows, None)."""
    if len(rows) <= 8:
        return rows, None
    seen: dict[bytes, int] = {}
    inverse = np.fromiter((seen.setdefault(r.tobytes(), len(seen)) for r in rows), dtype=np.intp, count=len(rows))
    if len(seen) == len(rows):
        return rows, None
    first = np.zeros(len(seen), dtype=np.intp)
    first[inverse[::-1]] = np.arange(len(rows))[::-1]
    return rows[first], inverse


class LatentDynamics(Module):
    """f(z, a) -> z' in embedding space."""

    def __init__(self, cfg: NetConfig, rng):
        self.net = MLP((cfg.embed_dim + cfg.action_dim, *cfg.hidden, cfg.embed_dim), rng)
        self.embed_dim, self.action_dim = cfg.embed_dim, cfg.action_dim

    def __call__(self, z, actions) -> Tensor:
        z, actions = ad.as_tensor(z), ad.as_tensor(actions)
        if z.ndim != 2 or z.shape[1] != self.embed_dim or actions.shape != (z.shape[0], self.action_dim):
            raise ad.ShapeError(f"latent_step: embedding {z.shape} and action {actions.shape} do not match")
        return self.net(ad.concat([z, actions], axis=1))


class GoalConditionedQ(Module):
    """Q(o, a, o_g) in one of three architectures.

    ``unstructured`` encodes observation and goal with separate encoders,
    ``shared`` ties them, and ``structured`` computes
    ``gamma ** ||f(phi(o), a) - phi(o_g)||``.
    """

    def __init__(self, arch: str, cfg: NetConfig, rng: np.random.Generator):
        if arch not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {arch!r}; expected one of {ARCHITECTURES}")
        self.arch, self.cfg, self.gamma = arch, cfg, cfg.gamma
        self.encoder = Encoder(cfg, rng)
        if arch == "unstructured":
            self.goal_encoder = Encoder(cfg, rng)
        else:
            self.goal_encoder = self.encoder
        if arch == "structured":
            self.dynamics = LatentDynamics(cfg, rng)
        else:
            self.trunk = MLP((2 * cfg.embed_dim + cfg.action_dim, *cfg.hidden, 1), rng)

    def embed(self, observations) -> Tensor:
        return self.encoder(observations)

    def embed_goal(self, goals) -> Tensor:
        return self.goal_encoder(goals)

    def latent_distance(self, z, actions, z_goal) -> Tensor:
        if self.arch != "structured":
            raise ValueError("latent distance exists only for the structured architecture")
        return ad.l2_norm(self.dynamics(z, executed(actions)) - z_goal, axis=1)

    def from_embeddings(self, z, actions, z_goal) -> Tensor:
        actions = executed(actions)
        if self.arch == "structured":
            dist = ad.minimum(self.latent_distance(z, actions, z_goal), MAX_EXPONENT)
            return ad.exp(dist * math.log(self.gamma))
        x = ad.concat([ad.as_tensor(z), ad.as_tensor(z_goal), ad.as_tensor(actions)], axis=1)
        return ad.tanh(ad.reshape(self.trunk(x), (x.shape[0],)))

    def __call__(self, observations, actions, goals) -> Tensor:
        return self.from_embeddings(self.embed(observations), actions, self.embed_goal(goals))

    def value(self, observations, actions, goals) -> np.ndarray:
        return self(observations, actions, goals).value


class GaussianPolicy(Module):
    """Diagonal Gaussian pi(a | o, o_g); one encoder applied to both images."""

    def __init__(self, cfg: NetConfig, rng):
        self.cfg = cfg
        self.encoder = Encoder(cfg, rng)
        self.trunk = MLP((2 * cfg.embed_dim, *cfg.hidden, 2 * cfg.action_dim), rng)

    def from_embeddings(self, z, z_goal) -> tuple[Tensor, Tensor]:
        head = self.trunk(ad.concat([ad.as_tensor(z), ad.as_tensor(z_goal)], axis=1))
        a = self.cfg.action_dim
        mean = head[:, :a]
        std = ad.softplus(head[:, a:]) + self.cfg.std_floor
        return mean, std

    def __call__(self, observations, goals) -> tuple[Tensor, Tensor]:
        return self.from_embeddings(self.encoder(observations), self.encoder(goals))

    def dist(self, observations, goals) -> tuple[np.ndarray, np.ndarray]:
        mean, std = self(observations, goals)
        return mean.value, std.value


def sample_actions(mean: np.ndarray, std: np.ndarray, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
    """Draw actions; with ``n`` the result has shape (n, *mean.shape)."""
    shape = mean.shape if n is None else (n, *mean.shape)
    return mean + std * rng.standard_normal(shape)


def gaussian_log_prob(mean, std, actions) -> np.ndarray:
    mean, std, actions = (np.asarray(v, float) for v in (mean, std, actions))
    z = (actions - mean) / std
    return -0.5 * (z * z).sum(-1) - np.log(std).sum(-1) - 0.5 * mean.shape[-1] * LOG_2PI


def gaussian_log_prob_t(mean: Tensor, std: Tensor, actions) -> Tensor:
    """Differentiable diagonal-Gaussian log-density summed over the last axis."""
    z = (ad.as_tensor(actions) - mean) / std
    d = mean.shape[-1]
    return ad.reduce_sum(ad.square(z), axis=-1) * -0.5 - ad.reduce_sum(ad.log(std), axis=-1) - 0.5 * d * LOG_2PI


def gaussian_kl_t(mean_old, std_old, mean_new: Tensor, std_new: Tensor) -> Tensor:
    """KL(old || new) for diagonal Gaussians, summed over the last axis."""
    var_old = np.asarray(std_old) ** 2
    diff = mean_new - np.asarray(mean_old)
    terms = ad.log(std_new) - np.log(std_old) + (ad.square(diff) + var_old) / (ad.square(std_new) * 2.0) - 0.5
    return ad.reduce_sum(terms, axis=-1)
