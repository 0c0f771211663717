"""Sequence assembly with randomized frame skipping, and order-preserving batching.

A sample is anchored on its latest frame; earlier elements are reached by
walking back through gaps. With temporal offsets enabled, each gap is drawn
independently per sample from {1, ..., 1 + max_skip}, so the time interval
between sequence elements varies from sample to sample and epoch to epoch.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .config import SamplerConfig
from .errors import ConfigError, InsufficientFrames
from .pointcloud_io import Box3D, FrameRecord


@dataclass(frozen=True)
class SequenceSample:
    indices: tuple[int, ...]
    frames: tuple[FrameRecord, ...]

    def __post_init__(self):
        ts = self.timestamps
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError(f"sample timestamps not strictly increasing: {ts}")

    @property
    def timestamps(self) -> tuple[float, ...]:
        return tuple(f.timestamp for f in self.frames)

    @property
    def target_boxes(self) -> tuple[Box3D, ...]:
        return self.frames[-1].boxes

    @property
    def gaps(self) -> tuple[int, ...]:
        return tuple(b - a for a, b in zip(self.indices, self.indices[1:]))

    def __len__(self) -> int:
        return len(self.indices)


Batch = list[SequenceSample]


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    """Generator for one epoch: the seed and epoch index are hashed together."""
    return np.random.default_rng(np.random.SeedSequence([seed & (2**64 - 1), epoch]))


def first_anchor(cfg: SamplerConfig) -> int:
    span = 1 + cfg.max_skip if cfg.offset_enabled else 1
    return (cfg.sq - 1) * span


def enumerate_samples(
    frames: Sequence[FrameRecord], cfg: SamplerConfig, rng: np.random.Generator
) -> list[SequenceSample]:
    if cfg.sq < 1 or cfg.max_skip < 0:
        raise ConfigError("sq must be >= 1 and max_skip >= 0")
    if len(frames) < cfg.sq:
        raise InsufficientFrames(f"{len(frames)} frames cannot form a sequence of length {cfg.sq}")
    start = first_anchor(cfg)
    if start >= len(frames):
        raise InsufficientFrames(
            f"{len(frames)} frames too few for sq={cfg.sq} with max_skip={cfg.max_skip}"
        )
    n_gaps = cfg.sq - 1
    out = []
    for anchor in range(start, len(frames)):
        if cfg.offset_enabled and n_gaps:
            gaps = rng.integers(1, cfg.max_skip + 2, size=n_gaps)
        else:
            gaps = np.ones(n_gaps, dtype=np.int64)
        # gaps[k] separates element k and k+1 (earliest first)
        idx = anchor - np.concatenate([np.cumsum(gaps[::-1])[::-1], [0]])
        indices = tuple(int(i) for i in idx)
        out.append(SequenceSample(indices, tuple(frames[i] for i in indices)))
    return out


def make_batches(
    samples: Sequence[SequenceSample], cfg: SamplerConfig, rng: np.random.Generator
) -> list[Batch]:
    """Split into batches; shuffling permutes whole samples, never frames within one."""
    if not samples:
        raise ValueError("cannot batch an empty sample list")
    order = rng.permutation(len(samples)) if cfg.shuffle else np.arange(len(samples))
    bs = cfg.batch_size
    return [[samples[i] for i in order[k:k + bs]] for k in range(0, len(order), bs)]


def gap_histogram(samples: Sequence[SequenceSample]) -> dict[int, int]:
    hist: dict[int, int] = {}
    for s in samples:
        for g in s.gaps:
            hist[g] = hist.get(g, 0) + 1
    return dict(sorted(hist.items()))
