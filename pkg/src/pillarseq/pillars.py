"""Point cloud -> pillar tensors -> BEV pseudo-image, plus cylindrical view binning."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import GridSpec
from .errors import ConfigError
from .pointcloud_io import PointCloud

BASE_FEATURES = 9


@dataclass
class PillarTensorBundle:
    """Per-pillar point features.

    ``features`` is (P, N, D) float64 with zero rows beyond ``occupancy[p]``;
    ``coords`` is (P, 2) integer (ix, iy); ``raw_counts`` are the per-pillar
    counts before truncation to ``max_points_per_pillar``.
    """

    features: np.ndarray
    coords: np.ndarray
    occupancy: np.ndarray
    raw_counts: np.ndarray

    @property
    def n_pillars(self) -> int:
        return self.features.shape[0]


def cell_indices(xy: np.ndarray, grid: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    """Half-open cells; a coordinate exactly on the top edge lands in the last cell."""
    ix = np.floor((xy[:, 0] - grid.x_min) / grid.pillar_dx).astype(np.int64)
    iy = np.floor((xy[:, 1] - grid.y_min) / grid.pillar_dy).astype(np.int64)
    return np.minimum(ix, grid.nx - 1), np.minimum(iy, grid.ny - 1)


def crop_mask(pts: np.ndarray, grid: GridSpec) -> np.ndarray:
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    return (
        (x >= grid.x_min) & (x <= grid.x_max)
        & (y >= grid.y_min) & (y <= grid.y_max)
        & (z >= grid.z_min) & (z <= grid.z_max)
    )


def pillarize(
    cloud: PointCloud,
    grid: GridSpec,
    rng: np.random.Generator | None = None,
    extra: np.ndarray | None = None,
) -> PillarTensorBundle:
    """Group points into pillars and build the augmented per-point features.

    Features per point are (x, y, z, intensity, x-x̄, y-ȳ, z-z̄, x-x_c, y-y_c),
    then the temporal flag if the cloud carries one, then any ``extra``
    per-point columns. Means are over the points kept after truncation.
    """
    pts = cloud.data.astype(np.float64)
    if extra is not None:
        extra = np.asarray(extra, dtype=np.float64).reshape(len(pts), -1)
    n_extra = 0 if extra is None else extra.shape[1]
    d = BASE_FEATURES + int(cloud.has_flag) + n_extra
    n_max = grid.max_points_per_pillar

    keep = crop_mask(pts, grid)
    pts = pts[keep]
    if extra is not None:
        extra = extra[keep]
    if len(pts) == 0:
        return PillarTensorBundle(
            np.zeros((0, n_max, d)), np.zeros((0, 2), np.int64),
            np.zeros(0, np.int64), np.zeros(0, np.int64),
        )

    ix, iy = cell_indices(pts, grid)
    lin = iy * grid.nx + ix
    if grid.truncation == "random" and rng is not None:
        perm = rng.permutation(len(pts))
    else:
        perm = np.arange(len(pts))
    order = perm[np.argsort(lin[perm], kind="stable")]
    cells, starts, counts = np.unique(lin[order], return_index=True, return_counts=True)

    if len(cells) > grid.max_pillars:
        # keep the densest pillars; ties resolved by cell index
        chosen = np.sort(np.lexsort((cells, -counts))[: grid.max_pillars])
        cells, starts, counts = cells[chosen], starts[chosen], counts[chosen]

    n_pil = len(cells)
    occ = np.minimum(counts, n_max)
    slot = np.arange(n_max)
    valid = slot[None, :] < occ[:, None]
    src = np.where(valid, starts[:, None] + slot[None, :], 0)
    gathered = pts[order[src]]  # (P, N, 4 or 5)
    gathered[~valid] = 0.0

    xyz = gathered[..., :3]
    mean = xyz.sum(axis=1) / occ[:, None]
    cix = cells % grid.nx
    ciy = cells // grid.nx
    cx, cy = grid.cell_center(cix, ciy)

    feats = np.zeros((n_pil, n_max, d))
    feats[..., :4] = gathered[..., :4]
    feats[..., 4:7] = xyz - mean[:, None, :]
    feats[..., 7] = xyz[..., 0] - cx[:, None]
    feats[..., 8] = xyz[..., 1] - cy[:, None]
    col = BASE_FEATURES
    if cloud.has_flag:
        feats[..., col] = gathered[..., 4]
        col += 1
    if extra is not None:
        feats[..., col:] = extra[order[src]]
    feats[~valid] = 0.0
    coords = np.stack([cix, ciy], axis=1).astype(np.int64)
    return PillarTensorBundle(feats, coords, occ.astype(np.int64), counts.astype(np.int64))


def _check_coords(coords: np.ndarray, grid: GridSpec, n: int) -> np.ndarray:
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
    if len(coords) != n:
        raise ConfigError(f"{len(coords)} coords for {n} pillars")
    if len(coords) == 0:
        return coords
    if (coords < 0).any() or (coords[:, 0] >= grid.nx).any() or (coords[:, 1] >= grid.ny).any():
        raise ConfigError("pillar coords outside the grid")
    lin = coords[:, 1] * grid.nx + coords[:, 0]
    if len(np.unique(lin)) != len(lin):
        raise ConfigError("duplicate pillar coords")
    return coords


def scatter(pillar_features: np.ndarray, coords: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Place (P, C) pillar features into a zero (C, ny, nx) canvas."""
    pillar_features = np.asarray(pillar_features, dtype=np.float64)
    coords = _check_coords(coords, grid, len(pillar_features))
    c = pillar_features.shape[1] if pillar_features.ndim == 2 else 0
    out = np.zeros((c, grid.ny, grid.nx))
    if len(coords):
        out[:, coords[:, 1], coords[:, 0]] = pillar_features.T
    return out


def gather(image: np.ndarray, coords: np.ndarray) -> np.ndarray:
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
    return image[:, coords[:, 1], coords[:, 0]].T


def cylindrical_bins(
    cloud: PointCloud, n_azimuth: int, n_z: int, z_min: float, z_max: float
) -> tuple[np.ndarray, dict[tuple[int, int], list[int]]]:
    """Bin points by (azimuth, height) around the sensor's vertical axis.

    Returns the (n_azimuth, n_z) occupancy grid and, for each occupied bin,
    the indices of its points in input order.
    """
    if n_azimuth < 1 or n_z < 1:
        raise ConfigError("n_azimuth and n_z must be >= 1")
    if not z_max > z_min:
        raise ConfigError("z_max must exceed z_min")
    az, zb, keep = _cyl_index(cloud.data.astype(np.float64), n_azimuth, n_z, z_min, z_max)
    occupancy = np.zeros((n_azimuth, n_z), dtype=np.int64)
    np.add.at(occupancy, (az[keep], zb[keep]), 1)
    bins: dict[tuple[int, int], list[int]] = {}
    for i in np.flatnonzero(keep):
        bins.setdefault((int(az[i]), int(zb[i])), []).append(int(i))
    return occupancy, bins


def _cyl_index(pts, n_azimuth, n_z, z_min, z_max):
    ang = np.arctan2(pts[:, 1], pts[:, 0])
    az = np.floor((ang + math.pi) / (2 * math.pi) * n_azimuth).astype(np.int64)
    az = np.clip(az, 0, n_azimuth - 1)
    z = pts[:, 2]
    keep = (z >= z_min) & (z <= z_max)
    zb = np.floor((z - z_min) / (z_max - z_min) * n_z).astype(np.int64)
    zb = np.clip(zb, 0, n_z - 1)
    return az, zb, keep


def cylindrical_point_feature(
    cloud: PointCloud, n_azimuth: int, n_z: int, z_min: float, z_max: float
) -> np.ndarray:
    """Per-point occupancy of its cylindrical bin, normalized by the busiest bin."""
    pts = cloud.data.astype(np.float64)
    if len(pts) == 0:
        return np.zeros((0, 1))
    az, zb, keep = _cyl_index(pts, n_azimuth, n_z, z_min, z_max)
    occ = np.zeros((n_azimuth, n_z))
    np.add.at(occ, (az[keep], zb[keep]), 1.0)
    peak = max(occ.max(), 1.0)
    return np.where(keep, occ[az, zb] / peak, 0.0)[:, None]
