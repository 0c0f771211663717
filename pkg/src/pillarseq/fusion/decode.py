"""Head output -> scored boxes, with BEV non-maximum suppression."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from ..config import GridSpec, NetConfig
from ..detection_eval import bev_iou
from ..errors import ShapeMismatch
from ..pointcloud_io import Box3D
from ..tensor_nn.tensor import _sigmoid
from .model import N_BOX


def nms(dets: Sequence[Box3D], iou_threshold: float) -> list[Box3D]:
    """Greedy per-class NMS over confidence-sorted boxes."""
    dets = sorted(dets, key=lambda d: -(d.confidence or 0.0))
    kept: list[Box3D] = []
    for d in dets:
        if all(k.class_id != d.class_id or bev_iou(k, d) <= iou_threshold for k in kept):
            kept.append(d)
    return kept


def decode_detections(
    head_output: np.ndarray,
    grid: GridSpec,
    score_threshold: float,
    nms_iou: float,
    net: NetConfig | None = None,
    max_candidates: int = 200,
) -> list[Box3D]:
    net = net or NetConfig()
    k = net.n_classes
    out = np.asarray(head_output, dtype=np.float64)
    if out.shape != (k + N_BOX, grid.ny, grid.nx):
        raise ShapeMismatch(f"head output {out.shape} != {(k + N_BOX, grid.ny, grid.nx)}")
    with np.errstate(over="ignore", invalid="ignore"):
        probs = _sigmoid(out[:k])
    cls = probs.argmax(axis=0)
    score = probs.max(axis=0)
    iy, ix = np.nonzero(score >= score_threshold)
    if len(iy) == 0:
        return []
    order = np.argsort(-score[iy, ix], kind="stable")[:max_candidates]
    iy, ix = iy[order], ix[order]
    dets = []
    for y, x in zip(iy, ix):
        r = out[k:, y, x]
        c = int(cls[y, x])
        xc, yc = grid.cell_center(x, y)
        pl, pw, ph = net.prior_dims[c]
        dims = [p * math.exp(min(max(v, -5.0), 5.0)) for p, v in zip((pl, pw, ph), r[3:6])]
        dets.append(Box3D(
            xc + r[0] * grid.pillar_dx, yc + r[1] * grid.pillar_dy, net.prior_z + r[2],
            *dims, math.atan2(r[6], r[7]), c, float(min(max(score[y, x], 0.0), 1.0)),
        ))
    return nms(dets, nms_iou)
