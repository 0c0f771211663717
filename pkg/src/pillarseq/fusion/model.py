"""Detector assembly for every fusion variant, training targets and loss."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..config import TABLE_LABELS, GridSpec, NetConfig
from ..errors import ConfigError
from ..pillars import BASE_FEATURES, PillarTensorBundle, cell_indices, cylindrical_point_feature, pillarize
from ..pointcloud_io import Box3D, PointCloud
from ..tensor_nn import (
    Conv2d, ConvBlock, Linear, Module, Tensor, apply_filter_factor, bce_with_logits,
    max_over_points, relu, scale, scatter_cells, slice_axis0, smooth_l1,
)
from .concat import concat_clouds
from .convlstm import ConvLstmNet
from .fc import CellMlp, fc_forward

KINDS = ("Baseline", "IC", "ICPlus", "FC", "FCPlus", "Lstm", "LstmNet")
N_BOX = 8  # dx, dy, z, log l, log w, log h, sin yaw, cos yaw
PRIOR_PROB = 0.01


@dataclass(frozen=True)
class FusionKind:
    name: str
    offset_enabled: bool = False

    def __post_init__(self):
        if self.name not in KINDS:
            raise ConfigError(f"unknown fusion kind {self.name!r}")

    @classmethod
    def from_label(cls, label: str) -> "FusionKind":
        try:
            name, offset = TABLE_LABELS[label]
        except KeyError:
            raise ConfigError(f"unknown model label {label!r}") from None
        return cls(name, offset)

    def check_sq(self, sq: int) -> None:
        if self.name == "Baseline" and sq != 1:
            raise ConfigError("Baseline requires SQ == 1")
        if self.name != "Baseline" and sq < 2:
            raise ConfigError(f"{self.name} requires SQ >= 2")


class PillarEncoder(Module):
    """Shared per-point linear layer, relu, max over the points of each pillar."""

    def __init__(self, d_in: int, c_out: int, rng: np.random.Generator):
        super().__init__()
        self.d_in = d_in
        self.lin = self.child("lin", Linear(d_in, c_out, rng))

    def __call__(self, bundle: PillarTensorBundle, grid: GridSpec) -> Tensor:
        x = Tensor(bundle.features)
        pooled = max_over_points(relu(self.lin(x)), bundle.occupancy)
        return scatter_cells(pooled, bundle.coords, grid.ny, grid.nx)


class Detector(Module):
    """pillars -> pseudo-image(s) -> fusion -> conv backbone -> per-cell head."""

    def __init__(self, kind: FusionKind, grid: GridSpec, net: NetConfig, sq: int = 1):
        super().__init__()
        kind.check_sq(sq)
        self.kind = kind
        self.grid = grid
        self.net = net
        self.sq = sq
        widths = apply_filter_factor([net.pillar_channels, *net.backbone_channels], net.filter_factor)
        c, backbone = widths[0], widths[1:]
        self.channels = c
        self.cylindrical = net.cylindrical if net.cylindrical is not None else kind.name == "Baseline"
        self.d_in = BASE_FEATURES + int(kind.name == "ICPlus") + int(self.cylindrical)
        rng = np.random.default_rng(net.seed)

        name = kind.name
        if name in ("FC", "FCPlus"):
            self.encoders = [self.child(f"enc{i}", PillarEncoder(self.d_in, c, rng)) for i in range(sq)]
        else:
            self.encoders = [self.child("enc", PillarEncoder(self.d_in, c, rng))]
        self.mlp = self.child("mlp", CellMlp(sq * c, c, c, rng)) if name == "FCPlus" else None
        self.lstm = None
        if name in ("Lstm", "LstmNet"):
            layers = 1 if name == "Lstm" else net.lstm_layers
            self.lstm = self.child("lstm", ConvLstmNet(c, c, layers, rng))
        fused = sq * c if name == "FC" else c

        self.blocks = []
        prev = fused
        for i, w in enumerate(backbone):
            self.blocks.append(self.child(f"block{i}", ConvBlock(prev, w, rng)))
            prev = w
        self.n_out = net.n_classes + N_BOX
        self.head = self.child("head", Conv2d(prev, self.n_out, 1, rng))
        self.head.b.data[: net.n_classes] = -math.log((1 - PRIOR_PROB) / PRIOR_PROB)

    @property
    def per_frame(self) -> bool:
        return self.kind.name not in ("Baseline", "IC", "ICPlus")

    def prepare_frame(self, cloud: PointCloud) -> PillarTensorBundle:
        extra = None
        if self.cylindrical:
            extra = cylindrical_point_feature(cloud, self.net.n_azimuth, self.net.n_z, self.grid.z_min, self.grid.z_max)
        return pillarize(cloud, self.grid, extra=extra)

    def prepare(self, clouds: Sequence[PointCloud]) -> list[PillarTensorBundle]:
        """Network inputs for one sequence (earliest frame first); pure numpy, cacheable."""
        if len(clouds) != self.sq:
            raise ConfigError(f"expected {self.sq} clouds, got {len(clouds)}")
        if self.per_frame:
            return [self.prepare_frame(c) for c in clouds]
        if self.kind.name == "Baseline":
            return [self.prepare_frame(clouds[0])]
        return [self.prepare_frame(concat_clouds(clouds, with_encoding=self.kind.name == "ICPlus"))]

    def fuse(self, bundles: Sequence[PillarTensorBundle]) -> Tensor:
        name = self.kind.name
        if name in ("FC", "FCPlus"):
            images = [enc(b, self.grid) for enc, b in zip(self.encoders, bundles)]
            return fc_forward(images, self.mlp)
        images = [self.encoders[0](b, self.grid) for b in bundles]
        if self.lstm is not None:
            return self.lstm(images)
        return images[0]

    def __call__(self, bundles: Sequence[PillarTensorBundle]) -> Tensor:
        x = self.fuse(bundles)
        for block in self.blocks:
            x = block(x)
        return self.head(x)


def build_model(kind: FusionKind | str, grid: GridSpec, net: NetConfig, sq: int | None = None) -> Detector:
    if isinstance(kind, str):
        kind = FusionKind.from_label(kind) if kind in TABLE_LABELS else FusionKind(kind)
    if sq is None:
        sq = 1 if kind.name == "Baseline" else 2
    return Detector(kind, grid, net, sq)


# training targets --------------------------------------------------------------

def encode_targets(boxes: Sequence[Box3D], grid: GridSpec, net: NetConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-cell class targets (K, ny, nx), box residuals (8, ny, nx) and the positive mask."""
    k = net.n_classes
    cls_t = np.zeros((k, grid.ny, grid.nx))
    reg_t = np.zeros((N_BOX, grid.ny, grid.nx))
    pos = np.zeros((grid.ny, grid.nx), dtype=bool)
    for b in boxes:
        if not (grid.x_min <= b.cx <= grid.x_max and grid.y_min <= b.cy <= grid.y_max):
            continue
        if not 0 <= b.class_id < k:
            continue
        ix, iy = (int(v[0]) for v in cell_indices(np.array([[b.cx, b.cy]]), grid))
        xc, yc = grid.cell_center(ix, iy)
        pl, pw, ph = net.prior_dims[b.class_id]
        cls_t[b.class_id, iy, ix] = 1.0
        reg_t[:, iy, ix] = (
            (b.cx - xc) / grid.pillar_dx, (b.cy - yc) / grid.pillar_dy, b.cz - net.prior_z,
            math.log(b.l / pl), math.log(b.w / pw), math.log(b.h / ph),
            math.sin(b.yaw), math.cos(b.yaw),
        )
        pos[iy, ix] = True
    return cls_t, reg_t, pos


def detection_loss(head: Tensor, boxes: Sequence[Box3D], grid: GridSpec, net: NetConfig) -> Tensor:
    """Weighted BCE on class logits plus smooth-L1 on box residuals at positive cells."""
    k = net.n_classes
    cls_t, reg_t, pos = encode_targets(boxes, grid, net)
    n_pos = max(int(pos.sum()), 1)
    weights = np.where(cls_t > 0, net.pos_weight, 1.0)
    cls_loss = bce_with_logits(slice_axis0(head, 0, k), cls_t, weights)
    mask = np.broadcast_to(pos, reg_t.shape).astype(np.float64)
    box_loss = smooth_l1(slice_axis0(head, k, k + N_BOX), reg_t, mask)
    return scale(cls_loss + scale(box_loss, net.box_loss_weight), 1.0 / n_pos)
