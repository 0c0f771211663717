import numpy as np
import pytest

from pillarseq.config import build_config
from pillarseq.pointcloud_io import Box3D, FrameRecord, PointCloud


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_frames(n, dt=0.1, boxes=()):
    return [FrameRecord(f"frame_{i}.bin", round(i * dt, 9), tuple(boxes)) for i in range(n)]


def random_cloud(rng, n, extent=10.0, with_flag=False):
    data = np.column_stack([
        rng.uniform(-extent, extent, (n, 2)), rng.uniform(-2, 2, n), rng.uniform(0, 1, n),
    ])
    if with_flag:
        data = np.column_stack([data, rng.integers(0, 2, n)])
    return PointCloud(data, with_flag=with_flag)


@pytest.fixture
def small_cfg():
    return build_config({
        "model": "PBOD",
        "grid": {"x_min": -8, "x_max": 8, "y_min": -8, "y_max": 8, "pillar_dx": 1.0, "pillar_dy": 1.0,
                 "max_points_per_pillar": 8, "max_pillars": 256},
        "net": {"filter_factor": 2, "pillar_channels": 8, "backbone_channels": [8, 8], "epochs": 2},
        "dataset": {"synth": {"n_frames": 8, "n_objects": 2, "extent": [-7, 7, -7, 7]}},
    })


def box(cx=0.0, cy=0.0, l=2.0, w=2.0, yaw=0.0, cls=0, conf=None):
    return Box3D(cx, cy, 0.0, l, w, 1.5, yaw, cls, conf)
