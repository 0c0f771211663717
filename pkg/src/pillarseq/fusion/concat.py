"""Input-level fusion: merge the clouds of a sequence into one cloud."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ..errors import FlagCollision
from ..pointcloud_io import PointCloud


def concat_clouds(
    clouds: Sequence[PointCloud],
    with_encoding: bool = False,
    transforms: Sequence[np.ndarray] | None = None,
) -> PointCloud:
    """All points of cloud 0, then cloud 1, and so on.

    With ``with_encoding`` each point gains its source index as temporal flag.
    ``transforms`` optionally maps each cloud into a common frame (4x4 rigid
    transforms); by default clouds are merged in their own sensor frames.
    """
    if not clouds:
        raise ValueError("concat_clouds needs at least one cloud")
    if any(c.has_flag for c in clouds):
        raise FlagCollision("input clouds already carry temporal flags")
    parts = []
    for i, c in enumerate(clouds):
        arr = c.data.copy()
        if transforms is not None:
            tf = np.asarray(transforms[i], dtype=np.float64)
            xyz = arr[:, :3].astype(np.float64) @ tf[:3, :3].T + tf[:3, 3]
            arr[:, :3] = xyz.astype(np.float32)
        if with_encoding:
            arr = np.concatenate([arr, np.full((len(arr), 1), i, dtype=np.float32)], axis=1)
        parts.append(arr)
    return PointCloud(np.concatenate(parts, axis=0), with_flag=with_encoding)
