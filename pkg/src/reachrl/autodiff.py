"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Operations executed while a :class:`Tape` is active are recorded in order;
``Tape.gradient`` walks the record backwards once. Outside a tape the same
functions just compute values, which is how target networks and rollouts
run without paying for bookkeeping.

    >>> w = Tensor.param([[2.0]])
    >>> with Tape() as tape:
    ...     y = (w * w).sum()
    >>> tape.gradient(y, [w])[0]
    array([[4.]])
"""

from __future__ import annotations

import math
import struct
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class NumericalError(ArithmeticError):
    """Raised when a non-finite value would enter the parameters."""


_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("value", "requires_grad", "_tracked")

    def __init__(self, value, requires_grad: bool = False):
        self.value = np.asarray(value, dtype=DTYPE)
        self.requires_grad = requires_grad
        self._tracked = requires_grad

    @classmethod
    def param(cls, value) -> "Tensor":
        return cls(np.array(value, dtype=DTYPE), requires_grad=True)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Record:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    name: str


class Tape:
    """Ordered record of primitive operations for one backward pass."""

    def __init__(self):
        self.records: list[_Record] = []
        self._outputs: dict[int, int] = {}
        self._used = False

    def __enter__(self) -> "Tape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def _record(self, name, out, inputs, backward) -> None:
        self._outputs[id(out)] = len(self.records)
        self.records.append(_Record(out, inputs, backward, name))

    def gradient(self, output: Tensor, sources: Sequence[Tensor], seed=None) -> list[np.ndarray]:
        """Gradients of ``output`` with respect to each tensor in ``sources``.

        ``output`` must be scalar unless ``seed`` (same shape as output) is given.
        Sources that do not influence the output receive zeros.
        """
        if self._used:
            raise TapeError("tape already consumed by a backward pass")
        if id(output) not in self._outputs:
            raise TapeError("backward called before forward: output was not recorded on this tape")
        if seed is None:
            if output.value.size != 1:
                raise ShapeError(f"backward: output shape {output.shape} is not scalar and no seed given")
            seed = np.ones_like(output.value)
        else:
            seed = np.asarray(seed, dtype=DTYPE)
            if seed.shape != output.shape:
                raise ShapeError(f"backward: seed shape {seed.shape} != output shape {output.shape}")
        self._used = True
        grads: dict[int, np.ndarray] = {id(output): seed}
        stop = self._outputs[id(output)]
        for rec in reversed(self.records[: stop + 1]):
            g = grads.pop(id(rec.out), None)
            if g is None:
                continue
            for inp, gi in zip(rec.inputs, rec.backward(g)):
                if gi is None or not inp._tracked:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        return [grads.get(id(s), np.zeros_like(s.value)) for s in sources]


def _emit(name: str, value: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(value)
    tape = _active_tape()
    if tape is not None and any(t._tracked for t in inputs):
        out._tracked = True
        tape._record(name, out, inputs, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(name, a, b):
    if a.shape == b.shape:
        return a.shape
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# --- elementwise binary -------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _emit("add", a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return _emit("sub", a.value - b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    av, bv = a.value, b.value
    return _emit(
        "mul", av * bv, (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    av, bv = a.value, b.value
    out = av / bv
    return _emit(
        "div", out, (a, b),
        lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)),
    )


def minimum(a, limit: float) -> Tensor:
    """Elementwise ``min(a, limit)``; zero gradient where clamped."""
    a = as_tensor(a)
    mask = a.value < limit
    return _emit("minimum", np.where(mask, a.value, limit), (a,), lambda g: (g * mask,))


# --- elementwise unary --------------------------------------------------------


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.value > 0
    return _emit("relu", a.value * mask, (a,), lambda g: (g * mask,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.value)
    return _emit("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.value)
    return _emit("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    v = a.value
    return _emit("log", np.log(v), (a,), lambda g: (g / v,))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    v = a.value
    out = np.logaddexp(0.0, v)
    return _emit("softplus", out, (a,), lambda g: (g * _sigmoid(v),))


def _sigmoid(v):
    return np.exp(-np.logaddexp(0.0, -v))


def square(a) -> Tensor:
    a = as_tensor(a)
    v = a.value
    return _emit("square", v * v, (a,), lambda g: (2.0 * g * v,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.value)
    return _emit("sqrt", out, (a,), lambda g: (0.5 * g / out,))


def l2_norm(a, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Smoothed Euclidean norm ``sqrt(sum(a**2) + eps)`` along ``axis``."""
    a = as_tensor(a)
    v = a.value
    out = np.sqrt((v * v).sum(axis=axis) + eps)

    def backward(g):
        return (np.expand_dims(g / out, axis) * v,)

    return _emit("l2_norm", out, (a,), backward)


# --- reductions and shape -----------------------------------------------------


def reduce_sum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit("sum", a.value.sum(axis=axis, keepdims=keepdims), (a,), backward)


def reduce_mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(reduce_sum(a, axis, keepdims), 1.0 / float(n))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.value.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} into {tuple(shape)}") from None
    return _emit("reshape", out, (a,), lambda g: (g.reshape(old),))


def take(a, index) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def backward(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, index, g)
        return (full,)

    return _emit("take", a.value[index], (a,), backward)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.value for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]} on axis {axis}") from None
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _emit("concat", out, ts, lambda g: tuple(np.split(g, splits, axis=axis)))


# --- linear algebra -----------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.value, b.value
    return _emit("matmul", av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def conv2d(x, w, stride: int = 1) -> Tensor:
    """'Same'-padded 2-D cross-correlation in NHWC layout with an (k, k, C_in, C_out) kernel.

    Only odd square kernels and strides 1 or 2 are supported. Output spatial
    size is ``ceil(H / stride)``. Implemented as one matrix product over
    im2col patches.
    """
    x, w = as_tensor(x), as_tensor(w)
    if stride not in (1, 2):
        raise ShapeError(f"conv2d: stride {stride} not in (1, 2)")
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and kernel, got {x.shape} and {w.shape}")
    n, h, wd, c = x.shape
    k, k2, ci, o = w.shape
    if ci != c or k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    p = k // 2
    ho, wo = (h - 1) // stride + 1, (wd - 1) // stride + 1
    xp = np.zeros((n, h + 2 * p, wd + 2 * p, c))
    xp[:, p : p + h, p : p + wd] = x.value
    s0, s1, s2, s3 = xp.strides
    patches = np.lib.stride_tricks.as_strided(
        xp, (n, ho, wo, k, k, c), (s0, s1 * stride, s2 * stride, s1, s2, s3), writeable=False
    )
    cols = patches.reshape(n * ho * wo, k * k * c)
    w2 = w.value.reshape(k * k * c, o)
    out = (cols @ w2).reshape(n, ho, wo, o)

    def backward(g):
        g2 = g.reshape(n * ho * wo, o)
        gw = (cols.T @ g2).reshape(k, k, c, o)
        gcols = (g2 @ w2.T).reshape(n, ho, wo, k, k, c)
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                gxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[:, :, :, i, j]
        return gxp[:, p : p + h, p : p + wd], gw

    return _emit("conv2d", out, (x, w), backward)


# --- optimizer ----------------------------------------------------------------


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 5e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.state = AdamState(
            m=[np.zeros_like(p.value) for p in self.params],
            v=[np.zeros_like(p.value) for p in self.params],
            lr=lr, beta1=beta1, beta2=beta2, eps=eps,
        )

    def step(self, grads: Sequence[np.ndarray]) -> None:
        s = self.state
        if len(grads) != len(self.params):
            raise ShapeError(f"adam_step: {len(grads)} gradients for {len(self.params)} parameters")
        for p, g in zip(self.params, grads):
            if g.shape != p.shape:
                raise ShapeError(f"adam_step: gradient shape {g.shape} != parameter shape {p.shape}")
            if not np.all(np.isfinite(g)):
                raise NumericalError("adam_step: non-finite gradient")
        s.step += 1
        t = s.step
        c1 = 1.0 - s.beta1**t
        c2 = 1.0 - s.beta2**t
        for p, g, m, v in zip(self.params, grads, s.m, s.v):
            m *= s.beta1
            m += (1.0 - s.beta1) * g
            v *= s.beta2
            v += (1.0 - s.beta2) * g * g
            p.value -= s.lr * (m / c1) / (np.sqrt(v / c2) + s.eps)


# --- checkpoints --------------------------------------------------------------
#
# Layout (all integers little-endian):
#   8 bytes   magic b"RRLCKPT1"
#   u32       number of entries n
#   n times:  u16 name length, utf-8 name, u8 ndim, ndim x u64 dims
#   payloads: for each entry in table order, prod(dims) float64 values (C order)

_MAGIC = b"RRLCKPT1"


def save_tensors(path, tensors: Mapping[str, np.ndarray]) -> None:
    header = [_MAGIC, struct.pack("<I", len(tensors))]
    payload = []
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8", order="C")
        raw = name.encode("utf-8")
        header.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        header.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        payload.append(arr.tobytes())
    Path(path).write_bytes(b"".join(header + payload))


def load_tensors(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:8] != _MAGIC:
        raise ValueError(f"{path}: not a tensor checkpoint")
    (n,) = struct.unpack_from("<I", data, 8)
    off = 12
    table = []
    for _ in range(n):
        (ln,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off : off + ln].decode("utf-8")
        off += ln
        (ndim,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}Q", data, off)
        off += 8 * ndim
        table.append((name, shape))
    out = {}
    for name, shape in table:
        count = math.prod(shape)
        out[name] = np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(shape).astype(DTYPE)
        off += 8 * count
    return out
