"""Parameter containers, layers, SGD, filter factor and checkpoint files."""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from ..errors import ConfigError, FormatError, IoFailure, MissingCheckpoint, ShapeMismatch
from . import tensor as T
from .tensor import Tensor


class Module:
    """Holds named parameters and child modules; ``named_parameters`` walks both."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._children: dict[str, Module] = {}

    def param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def child(self, name: str, mod: "Module") -> "Module":
        self._children[name] = mod
        return mod

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, c in self._children.items():
            yield from c.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_parameters()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise ShapeMismatch(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ShapeMismatch(f"{name}: checkpoint shape {arr.shape} != {p.shape}")
            p.data = arr.copy()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())


def _he_uniform(rng: np.random.Generator, shape: Sequence[int], fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.w = self.param("w", _he_uniform(rng, (n_in, n_out), n_in))
        self.b = self.param("b", np.zeros(n_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.w, self.b)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator, bias: bool = True, stride: int = 1):
        super().__init__()
        self.stride = stride
        self.k = self.param("k", _he_uniform(rng, (c_out, c_in, k, k), c_in * k * k))
        self.b = self.param("b", np.zeros(c_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.k, self.b, self.stride)


class ChannelAffine(Module):
    """Learnable per-channel gain and bias; stands in for batch norm."""

    def __init__(self, c: int):
        super().__init__()
        self.gain = self.param("gain", np.ones(c))
        self.bias = self.param("bias", np.zeros(c))

    def __call__(self, x: Tensor) -> Tensor:
        return T.channel_affine(x, self.gain, self.bias)


class ConvBlock(Module):
    """conv (no bias) -> per-channel affine -> relu."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, k: int = 3):
        super().__init__()
        self.conv = self.child("conv", Conv2d(c_in, c_out, k, rng, bias=False))
        self.norm = self.child("norm", ChannelAffine(c_out))

    def __call__(self, x: Tensor) -> Tensor:
        return T.relu(self.norm(self.conv(x)))


def apply_filter_factor(widths: Iterable[int], ff: int) -> tuple[int, ...]:
    widths = tuple(int(w) for w in widths)
    if ff < 1:
        raise ConfigError(f"filter factor must be >= 1, got {ff}")
    bad = [w for w in widths if w % ff]
    if bad:
        raise ConfigError(f"widths {bad} not divisible by filter factor {ff}")
    return tuple(w // ff for w in widths)


def sgd_step(params: Iterable[Tensor], lr: float) -> None:
    for p in params:
        if p.grad is not None:
            p.data = p.data - lr * p.grad


class SGD:
    """SGD with optional heavy-ball momentum and global-norm gradient clipping."""

    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.0, clip: float | None = None):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.clip = clip
        self._velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float((p.grad ** 2).sum()) for p in self.params if p.grad is not None)))

    def step(self) -> None:
        factor = 1.0
        if self.clip is not None:
            norm = self.grad_norm()
            if norm > self.clip:
                factor = self.clip / norm
        for p, v in zip(self.params, self._velocity):
            if p.grad is None:
                continue
            v *= self.momentum
            v += factor * p.grad
            p.data = p.data - self.lr * v


_MAGIC = b"PSEQCKPT"
_VERSION = 1


def save_checkpoint(state: Mapping[str, np.ndarray], path: str | Path) -> None:
    """Little-endian blob: magic, version, count, then (name, shape, f64 data) per tensor."""
    chunks = [_MAGIC, struct.pack("<II", _VERSION, len(state))]
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name], dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    try:
        Path(path).write_bytes(b"".join(chunks))
    except OSError as exc:
        raise IoFailure(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.is_file():
        raise MissingCheckpoint(f"checkpoint {path} not found")
    buf = path.read_bytes()
    if not buf.startswith(_MAGIC):
        raise FormatError(f"{path}: not a checkpoint file")
    off = len(_MAGIC)
    try:
        version, count = struct.unpack_from("<II", buf, off)
        off += 8
        if version != _VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        out = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", buf, off)
            off += 4
            name = buf[off:off + nlen].decode("utf-8")
            off += nlen
            (ndim,) = struct.unpack_from("<I", buf, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}Q", buf, off)
            off += 8 * ndim
            n = int(np.prod(shape, dtype=np.int64))
            out[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=off).reshape(shape).copy()
            off += 8 * n
    except (struct.error, ValueError) as exc:
        raise FormatError(f"{path}: truncated checkpoint") from exc
    if off != len(buf):
        raise FormatError(f"{path}: trailing bytes in checkpoint")
    return out
