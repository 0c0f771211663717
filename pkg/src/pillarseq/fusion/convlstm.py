"""Convolutional LSTM cell and stacked network over pseudo-image sequences."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..errors import ConfigError, ShapeMismatch
from ..tensor_nn import Module, Tensor, concat, conv2d, mul, sigmoid, slice_axis0, tanh


@dataclass
class ConvLstmState:
    h: Tensor
    c: Tensor

    @classmethod
    def zeros(cls, channels: int, ny: int, nx: int) -> "ConvLstmState":
        return cls(Tensor(np.zeros((channels, ny, nx))), Tensor(np.zeros((channels, ny, nx))))


def convlstm_cell(x: Tensor, state: ConvLstmState, kernel: Tensor, bias: Tensor) -> tuple[Tensor, ConvLstmState]:
    """One step. ``kernel`` is (4C, C_in + C, k, k) with gate blocks ordered i, f, o, g."""
    hid = state.h.shape[0]
    if state.h.shape != state.c.shape:
        raise ShapeMismatch("hidden and cell state shapes differ")
    if kernel.shape[0] != 4 * hid or kernel.shape[1] != x.shape[0] + hid:
        raise ShapeMismatch(f"kernel {kernel.shape} inconsistent with input {x.shape} and state {state.h.shape}")
    z = conv2d(concat([x, state.h], axis=0), kernel, bias)
    i = sigmoid(slice_axis0(z, 0, hid))
    f = sigmoid(slice_axis0(z, hid, 2 * hid))
    o = sigmoid(slice_axis0(z, 2 * hid, 3 * hid))
    g = tanh(slice_axis0(z, 3 * hid, 4 * hid))
    c = mul(f, state.c) + mul(i, g)
    h = mul(o, tanh(c))
    return h, ConvLstmState(h, c)


class ConvLstmCell(Module):
    def __init__(self, c_in: int, hidden: int, rng: np.random.Generator, k: int = 3):
        super().__init__()
        self.hidden = hidden
        fan_in = (c_in + hidden) * k * k
        bound = np.sqrt(3.0 / fan_in)
        self.kernel = self.param("kernel", rng.uniform(-bound, bound, size=(4 * hidden, c_in + hidden, k, k)))
        b = np.zeros(4 * hidden)
        b[hidden:2 * hidden] = 1.0  # forget-gate bias: start by remembering
        self.bias = self.param("bias", b)

    def __call__(self, x: Tensor, state: ConvLstmState | None = None) -> tuple[Tensor, ConvLstmState]:
        if state is None:
            state = ConvLstmState.zeros(self.hidden, x.shape[1], x.shape[2])
        return convlstm_cell(x, state, self.kernel, self.bias)


def convlstm_net(xs: Sequence[Tensor], cells: Sequence[ConvLstmCell]) -> Tensor:
    """Layer k runs over the hidden sequence of layer k-1; returns the last hidden of the last layer."""
    if not cells:
        raise ConfigError("convlstm_net needs at least one layer")
    if not xs:
        raise ConfigError("convlstm_net needs at least one time step")
    seq = list(xs)
    for cell in cells:
        state = None
        outs = []
        for x in seq:
            h, state = cell(x, state)
            outs.append(h)
        seq = outs
    return seq[-1]


class ConvLstmNet(Module):
    def __init__(self, c_in: int, hidden: int, n_layers: int, rng: np.random.Generator):
        super().__init__()
        if n_layers < 1:
            raise ConfigError("n_layers must be >= 1")
        self.cells = [
            self.child(f"cell{k}", ConvLstmCell(c_in if k == 0 else hidden, hidden, rng))
            for k in range(n_layers)
        ]

    def __call__(self, xs: Sequence[Tensor]) -> Tensor:
        return convlstm_net(xs, self.cells)
