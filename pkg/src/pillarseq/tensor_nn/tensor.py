"""Dense float64 tensors with reverse-mode gradients.

Every op records its parents and a closure that pushes the output gradient
back to them. ``Tensor.backward`` walks that graph in reverse topological
order, accumulates into leaf ``.grad`` buffers, then frees the graph.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

from ..errors import NonFiniteValue, ShapeMismatch

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        if not np.isfinite(self.data).all():
            raise NonFiniteValue(f"non-finite values in tensor {name or ''}".strip())
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every leaf that requires grad."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeMismatch("backward() without a seed gradient needs a scalar")
            grad = np.ones_like(self.data)
        order = _topo(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
        for node in order:
            if node._backward is not None:
                node._parents = ()
                node._backward = None


def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteValue(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    needs = grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    out._parents = tuple(parents) if needs else ()
    out._backward = backward if needs else None
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} differ")


# elementwise -----------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    return _result(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def _sigmoid(v: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _result(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return _result(t, (x,), lambda g: (g * (1.0 - t * t),), "tanh")


# structural ------------------------------------------------------------------

def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise ShapeMismatch("concat of an empty list")
    ref = xs[0].shape
    ax = axis % len(ref)
    for x in xs[1:]:
        if len(x.shape) != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(x.shape, ref)) if i != ax
        ):
            raise ShapeMismatch(f"concat: {x.shape} incompatible with {ref} on axis {axis}")
    sizes = [x.shape[ax] for x in xs]
    cuts = np.cumsum(sizes)[:-1]
    return _result(
        np.concatenate([x.data for x in xs], axis=ax), xs,
        lambda g: tuple(np.split(g, cuts, axis=ax)), "concat",
    )


def slice_axis0(x: Tensor, start: int, stop: int) -> Tensor:
    shape = x.shape

    def back(g):
        full = np.zeros(shape)
        full[start:stop] = g
        return (full,)

    return _result(x.data[start:stop].copy(), (x,), back, "slice")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def scatter_cells(feats: Tensor, coords: np.ndarray, ny: int, nx: int) -> Tensor:
    """(P, C) -> (C, ny, nx) with row p placed at cell (iy, ix) = coords[p][::-1]."""
    if feats.ndim != 2 or len(coords) != feats.shape[0]:
        raise ShapeMismatch(f"scatter: features {feats.shape} vs {len(coords)} coords")
    ix, iy = coords[:, 0], coords[:, 1]
    out = np.zeros((feats.shape[1], ny, nx))
    out[:, iy, ix] = feats.data.T
    return _result(out, (feats,), lambda g: (g[:, iy, ix].T.copy(),), "scatter")


# reductions ------------------------------------------------------------------

def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _result(np.array(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean_all(x: Tensor) -> Tensor:
    return scale(sum_all(x), 1.0 / max(x.data.size, 1))


def max_over_points(x: Tensor, occupancy: np.ndarray) -> Tensor:
    """Masked max over axis 1 of (P, N, D); slots at or beyond occupancy are ignored."""
    if x.ndim != 3 or len(occupancy) != x.shape[0]:
        raise ShapeMismatch(f"max_over_points: x {x.shape}, occupancy {len(occupancy)}")
    p, n, d = x.shape
    valid = np.arange(n)[None, :] < np.asarray(occupancy)[:, None]
    masked = np.where(valid[..., None], x.data, -np.inf)
    arg = masked.argmax(axis=1)  # (P, D)
    empty = ~valid.any(axis=1)
    out = np.take_along_axis(x.data, arg[:, None, :], axis=1)[:, 0, :]
    out[empty] = 0.0

    def back(g):
        full = np.zeros((p, n, d))
        g = np.where(empty[:, None], 0.0, g)
        np.put_along_axis(full, arg[:, None, :], g[:, None, :], axis=1)
        return (full,)

    return _result(out, (x,), back, "max_over_points")


# dense layers ----------------------------------------------------------------

def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x (..., In) @ w (In, Out) + b (Out)."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeMismatch(f"linear: x {x.shape} vs W {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeMismatch(f"linear: bias {b.shape} vs W {w.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd
    if b is not None:
        out = out + b.data

    def back(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = xd.reshape(-1, xd.shape[-1])
        gx = g @ wd.T
        gw = x2.T @ g2
        gb = g2.sum(axis=0) if b is not None else None
        return (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return _result(out, parents, back, "linear")


def channel_affine(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """Per-channel ``gain * x + bias`` for x of shape (C, ...)."""
    c = x.shape[0]
    if gain.shape != (c,) or bias.shape != (c,):
        raise ShapeMismatch(f"channel_affine: x {x.shape}, gain {gain.shape}, bias {bias.shape}")
    ex = (slice(None),) + (None,) * (x.ndim - 1)
    xd, gd = x.data, gain.data
    red = tuple(range(1, x.ndim))

    def back(g):
        return (g * gd[ex], (g * xd).sum(axis=red), g.sum(axis=red))

    return _result(xd * gd[ex] + bias.data[ex], (x, gain, bias), back, "channel_affine")


def conv2d(x: Tensor, k: Tensor, b: Tensor | None = None, stride: int = 1) -> Tensor:
    """Same-padded 2D convolution (cross-correlation) of x (C, H, W) with k (O, C, kh, kw)."""
    if x.ndim != 3 or k.ndim != 4 or x.shape[0] != k.shape[1]:
        raise ShapeMismatch(f"conv2d: x {x.shape} vs kernel {k.shape}")
    if k.shape[2] % 2 == 0 or k.shape[3] % 2 == 0:
        raise ShapeMismatch("conv2d: same padding needs odd kernel sizes")
    if b is not None and b.shape != (k.shape[0],):
        raise ShapeMismatch(f"conv2d: bias {b.shape} vs kernel {k.shape}")
    if stride < 1:
        raise ShapeMismatch("conv2d: stride must be >= 1")
    c, h, w = x.shape
    o, _, kh, kw = k.shape
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    ho, wo = (h - 1) // stride + 1, (w - 1) // stride + 1
    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw)))
    cols = np.empty((c, kh, kw, ho, wo))
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride]
    cols2 = cols.reshape(c * kh * kw, ho * wo)
    kf = k.data.reshape(o, -1)
    out = (kf @ cols2).reshape(o, ho, wo)
    if b is not None:
        out += b.data[:, None, None]

    def back(g):
        g2 = g.reshape(o, -1)
        gk = (g2 @ cols2.T).reshape(k.shape)
        gcols = (kf.T @ g2).reshape(c, kh, kw, ho, wo)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, i, j]
        gx = gxp[:, ph:ph + h, pw:pw + w]
        gb = g2.sum(axis=1) if b is not None else None
        return (gx, gk, gb)

    parents = (x, k) if b is None else (x, k, b)
    return _result(out, parents, back, "conv2d")


# losses ----------------------------------------------------------------------

def bce_with_logits(logits: Tensor, targets: np.ndarray, weights: np.ndarray | None = None) -> Tensor:
    """Weighted sum of binary cross-entropy terms, computed stably from logits."""
    z = logits.data
    t = np.asarray(targets, dtype=np.float64)
    wts = np.ones_like(z) if weights is None else np.asarray(weights, dtype=np.float64)
    if t.shape != z.shape or wts.shape != z.shape:
        raise ShapeMismatch("bce_with_logits: targets/weights must match logits")
    loss = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    s = _sigmoid(z)
    return _result(np.array((wts * loss).sum()), (logits,), lambda g: (g * wts * (s - t),), "bce")


def smooth_l1(pred: Tensor, target: np.ndarray, mask: np.ndarray | None = None, beta: float = 1.0) -> Tensor:
    """Masked sum of Huber-style residual penalties."""
    t = np.asarray(target, dtype=np.float64)
    m = np.ones_like(pred.data) if mask is None else np.asarray(mask, dtype=np.float64)
    if t.shape != pred.shape or m.shape != pred.shape:
        raise ShapeMismatch("smooth_l1: target/mask must match pred")
    d = pred.data - t
    a = np.abs(d)
    small = a < beta
    val = np.where(small, 0.5 * d * d / beta, a - 0.5 * beta)
    dval = np.where(small, d / beta, np.sign(d))
    return _result(np.array((m * val).sum()), (pred,), lambda g: (g * m * dval,), "smooth_l1")
