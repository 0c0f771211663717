"""Feature-level fusion: channel concatenation of per-frame pseudo-images."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ..errors import ShapeMismatch
from ..tensor_nn import Conv2d, Module, Tensor, concat, relu


class CellMlp(Module):
    """Two-layer per-cell MLP, implemented as 1x1 convolutions."""

    def __init__(self, c_in: int, hidden: int, c_out: int, rng: np.random.Generator):
        super().__init__()
        self.fc1 = self.child("fc1", Conv2d(c_in, hidden, 1, rng))
        self.fc2 = self.child("fc2", Conv2d(hidden, c_out, 1, rng))

    def __call__(self, x: Tensor) -> Tensor:
        return relu(self.fc2(relu(self.fc1(x))))


def fc_forward(images: Sequence[Tensor], mlp: CellMlp | None = None) -> Tensor:
    """(SQ x [C, ny, nx]) -> [SQ*C, ny, nx], or [C, ny, nx] through the MLP."""
    if not images:
        raise ShapeMismatch("fc_forward needs at least one image")
    ref = images[0].shape
    for im in images[1:]:
        if im.shape != ref:
            raise ShapeMismatch(f"pseudo-image shapes differ: {im.shape} vs {ref}")
    out = concat(list(images), axis=0)
    return mlp(out) if mlp is not None else out
