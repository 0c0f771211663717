"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numeric_grad(f: Callable[[], float], arr: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """d f / d arr by central differences; ``arr`` is perturbed in place and restored."""
    g = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """max |a - n| / max(|a|, |n|, floor) over all elements."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float((np.abs(analytic - numeric) / denom).max(initial=0.0))


def check_gradients(
    build: Callable[[Sequence[Tensor]], Tensor],
    arrays: Sequence[np.ndarray],
    eps: float = 1e-5,
    seed: int = 0,
) -> float:
    """Max relative error between backprop and finite differences.

    ``build`` maps leaf tensors to an output of any shape; the output is
    contracted with a fixed random projection so every element contributes.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    out = build(leaves)
    proj = np.random.default_rng(seed).standard_normal(out.shape)
    out.backward(proj)

    def scalar() -> float:
        vals = build([Tensor(a) for a in arrays])
        return float((vals.data * proj).sum())

    worst = 0.0
    for leaf, arr in zip(leaves, arrays):
        num = numeric_grad(scalar, arr, eps)
        ana = leaf.grad if leaf.grad is not None else np.zeros_like(arr)
        worst = max(worst, relative_error(ana, num))
    return worst
