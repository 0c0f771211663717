"""Synthetic drives and adverse-weather corruption of point clouds.

Two failure modes are modelled: range-dependent loss of returns, and
spurious high-intensity backscatter points close to the sensor.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from .config import SynthSceneParams, WeatherParams
from .errors import IoFailure
from .pointcloud_io import Box3D, FrameRecord, PointCloud, write_cloud, write_manifest

NOISE_INTENSITY = (0.7, 1.0)


def corrupt(cloud: PointCloud, wp: WeatherParams, rng: np.random.Generator) -> PointCloud:
    """Drop, add and jitter points; survivors come first, then backscatter noise."""
    data = cloud.data
    origin = np.asarray(wp.sensor_origin, dtype=np.float64)
    if wp.dropout_prob_at_max_range > 0 and len(data):
        rng_m = np.linalg.norm(data[:, :3].astype(np.float64) - origin, axis=1)
        p_drop = np.minimum(wp.dropout_prob_at_max_range * rng_m / wp.max_range, 1.0)
        data = data[rng.random(len(data)) >= p_drop]
    else:
        data = data.copy()

    if wp.intensity_noise_sigma > 0 and len(data):
        jitter = rng.normal(0.0, wp.intensity_noise_sigma, size=len(data))
        data[:, 3] = np.clip(data[:, 3] + jitter, 0.0, 1.0).astype(np.float32)

    n_noise = int(rng.poisson(wp.backscatter_rate)) if wp.backscatter_rate > 0 and wp.backscatter_range > 0 else 0
    if n_noise:
        direction = rng.normal(size=(n_noise, 3))
        direction /= np.maximum(np.linalg.norm(direction, axis=1, keepdims=True), 1e-12)
        radius = wp.backscatter_range * rng.random(n_noise) ** (1.0 / 3.0)
        xyz = origin + direction * radius[:, None]
        noise = np.zeros((n_noise, data.shape[1]), dtype=np.float32)
        noise[:, :3] = xyz
        noise[:, 3] = rng.uniform(*NOISE_INTENSITY, size=n_noise)
        # float32 rounding can push a point just past the radius; pull it back inside
        dist = np.linalg.norm(noise[:, :3].astype(np.float64) - origin, axis=1)
        over = dist > wp.backscatter_range
        if over.any():
            shrink = (wp.backscatter_range / dist[over]) * (1 - 1e-6)
            noise[over, :3] = (origin + (noise[over, :3] - origin) * shrink[:, None]).astype(np.float32)
        data = np.concatenate([data, noise], axis=0)
    return PointCloud(data, with_flag=cloud.has_flag)


def frame_rng(seed: int, frame_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed & (2**64 - 1), frame_index, 0x57E4]))


def _place_objects(p: SynthSceneParams, rng: np.random.Generator):
    x0, x1, y0, y1 = p.extent
    ox, oy = p.sensor_origin[0], p.sensor_origin[1]
    placed = []
    for _ in range(p.n_objects):
        for _attempt in range(200):
            x, y = rng.uniform(x0, x1), rng.uniform(y0, y1)
            if math.hypot(x - ox, y - oy) < p.min_sensor_distance:
                continue
            if all(math.hypot(x - q[0], y - q[1]) > 1.5 * p.object_dims[0] for q in placed):
                break
        heading = rng.uniform(*p.heading_range)
        speed = rng.uniform(*p.speed_range)
        placed.append((x, y, heading, speed))
    return placed


def _position(p: SynthSceneParams, x: float, y: float) -> tuple[float, float]:
    """Objects leaving the extent re-enter on the opposite side when wrapping is on."""
    if not p.wrap:
        return x, y
    x0, x1, y0, y1 = p.extent
    return x0 + (x - x0) % (x1 - x0), y0 + (y - y0) % (y1 - y0)


def _surface_points(box: Box3D, n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform samples on the four sides and the top of a box."""
    l, w, h = box.l, box.w, box.h
    areas = np.array([l * h, l * h, w * h, w * h, l * w])
    face = rng.choice(5, size=n, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, size=n)
    v = rng.uniform(-0.5, 0.5, size=n)
    local = np.zeros((n, 3))
    local[:, 0] = np.select([face < 2, face < 4], [u * l, np.where(face == 2, 0.5, -0.5) * l], u * l)
    local[:, 1] = np.select([face < 2, face < 4], [np.where(face == 0, 0.5, -0.5) * w, u * w], v * w)
    local[:, 2] = np.where(face < 4, v * h, 0.5 * h)
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    world = local @ np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]]).T
    return world + np.array([box.cx, box.cy, box.cz])


def simulate_drive(p: SynthSceneParams, seed: int, weather: WeatherParams | None = None):
    """In-memory drive: list of (timestamp, PointCloud, boxes)."""
    rng = np.random.default_rng(seed)
    objects = _place_objects(p, rng)
    steps = np.concatenate([[0], np.cumsum(rng.integers(1, p.max_interval_multiple + 1, size=p.n_frames - 1))])
    x0, x1, y0, y1 = p.extent
    n_ground = max(1, int(round(p.ground_density * (x1 - x0) * (y1 - y0))))
    l, w, h = p.object_dims
    frames = []
    for i, step in enumerate(steps):
        t = round(float(step) * p.frame_dt, 9)
        boxes = tuple(
            Box3D(*_position(p, x + sp * math.cos(hd) * t, y + sp * math.sin(hd) * t), p.ground_z + h / 2,
                  l, w, h, hd, p.class_id)
            for x, y, hd, sp in objects
        )
        ground = np.column_stack([
            rng.uniform(x0, x1, n_ground), rng.uniform(y0, y1, n_ground),
            p.ground_z + rng.normal(0.0, 0.02, n_ground), rng.uniform(0.05, 0.25, n_ground),
        ])
        parts = [ground]
        for b in boxes:
            xyz = _surface_points(b, p.points_per_object, rng)
            parts.append(np.column_stack([xyz, rng.uniform(0.4, 0.6, len(xyz))]))
        cloud = PointCloud(np.concatenate(parts, axis=0))
        if weather is not None:
            cloud = corrupt(cloud, weather, frame_rng(weather.seed or 0, i))
        frames.append((t, cloud, boxes))
    return frames


def generate_drive(
    p: SynthSceneParams, out_dir: str | Path, seed: int, weather: WeatherParams | None = None
) -> tuple[list[FrameRecord], Path]:
    """Write a drive directory of ``frame_XXXX.bin`` clouds plus ``manifest.json``."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create {out_dir}: {exc}") from exc
    records = []
    for i, (t, cloud, boxes) in enumerate(simulate_drive(p, seed, weather)):
        path = out_dir / f"frame_{i:04d}.bin"
        write_cloud(cloud, path)
        records.append(FrameRecord(path, t, boxes))
    manifest = out_dir / "manifest.json"
    write_manifest(records, manifest)
    return records, manifest
