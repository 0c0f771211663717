"""Training, prediction, evaluation and augmentation audit for one experiment config."""

from __future__ import annotations

import json
import math
import time
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .config import ExperimentConfig, GridSpec, SamplerConfig
from .detection_eval import EvalReport, benchmark_inference, evaluate
from .errors import ConfigError
from .fusion import Detector, FusionKind, build_model, decode_detections, detection_loss
from .pillars import PillarTensorBundle
from .pointcloud_io import Box3D, FrameRecord, PointCloud, read_cloud, read_manifest
from .sequencer import SequenceSample, enumerate_samples, epoch_rng, gap_histogram, make_batches
from .tensor_nn import SGD, no_grad


class FrameStore:
    """Lazily loaded clouds and cached network inputs for one drive."""

    def __init__(self, frames: Sequence[FrameRecord], clouds: Sequence[PointCloud] | None = None):
        self.frames = list(frames)
        self._clouds: dict[int, PointCloud] = dict(enumerate(clouds)) if clouds is not None else {}
        self._inputs: dict[tuple, PillarTensorBundle] = {}

    def cloud(self, i: int) -> PointCloud:
        if i not in self._clouds:
            self._clouds[i] = read_cloud(self.frames[i].cloud_path)
        return self._clouds[i]

    def clouds(self, sample: SequenceSample) -> list[PointCloud]:
        return [self.cloud(i) for i in sample.indices]

    def inputs(self, model: Detector, sample: SequenceSample) -> list[PillarTensorBundle]:
        if model.per_frame:
            out = []
            for i in sample.indices:
                key = ("frame", i)
                if key not in self._inputs:
                    self._inputs[key] = model.prepare_frame(self.cloud(i))
                out.append(self._inputs[key])
            return out
        key = ("seq", sample.indices)
        if key not in self._inputs:
            self._inputs[key] = model.prepare(self.clouds(sample))[0]
        return [self._inputs[key]]


def load_frames(manifest: str | Path) -> FrameStore:
    return FrameStore(read_manifest(manifest))


def new_model(cfg: ExperimentConfig) -> Detector:
    return build_model(FusionKind.from_label(cfg.model), cfg.grid, cfg.net, cfg.sampler.sq)


def learning_rate(base: float, epoch: int, epochs: int, schedule: str) -> float:
    if schedule == "cosine":
        return base * 0.5 * (1.0 + math.cos(math.pi * epoch / epochs))
    return base


def train_model(
    cfg: ExperimentConfig,
    store: FrameStore,
    on_epoch: Callable[[dict], None] | None = None,
) -> Detector:
    """SGD over the sampler's batches; temporal offsets are redrawn every epoch."""
    model = new_model(cfg)
    net = cfg.net
    opt = SGD(model.parameters(), net.lr, net.momentum, net.grad_clip)
    for epoch in range(net.epochs):
        t0 = time.perf_counter()
        opt.lr = learning_rate(net.lr, epoch, net.epochs, net.lr_schedule)
        rng = epoch_rng(cfg.sampler.seed, epoch)
        samples = enumerate_samples(store.frames, cfg.sampler, rng)
        batches = make_batches(samples, cfg.sampler, rng)
        losses = []
        for batch in batches:
            opt.zero_grad()
            for s in batch:
                loss = detection_loss(model(store.inputs(model, s)), s.target_boxes, cfg.grid, net)
                loss.backward()
                losses.append(loss.item())
            for p in opt.params:
                if p.grad is not None:
                    p.grad /= len(batch)
            opt.step()
        if on_epoch is not None:
            on_epoch({
                "epoch": epoch,
                "loss": float(np.mean(losses)),
                "lr": opt.lr,
                "n_samples": len(samples),
                "n_batches": len(batches),
                "gap_histogram": {str(k): v for k, v in gap_histogram(samples).items()},
                "seconds": time.perf_counter() - t0,
            })
    return model


def eval_sampler(cfg: SamplerConfig) -> SamplerConfig:
    """Evaluation always uses consecutive frames in stream order."""
    return cfg.model_copy(update={"offset_enabled": False, "shuffle": False})


def in_grid(b: Box3D, grid: GridSpec) -> bool:
    return grid.x_min <= b.cx <= grid.x_max and grid.y_min <= b.cy <= grid.y_max


def predict(model: Detector, cfg: ExperimentConfig, store: FrameStore, samples: Sequence[SequenceSample]):
    """Detections per sample plus per-sample forward wall time (pillarize + network)."""
    preds, times = [], []
    with no_grad():
        for s in samples:
            t0 = time.perf_counter()
            head = model(model.prepare(store.clouds(s)))
            times.append(time.perf_counter() - t0)
            dets = decode_detections(head.data, cfg.grid, cfg.eval.score_threshold, cfg.eval.nms_iou, cfg.net)
            preds.append([d for d in dets if in_grid(d, cfg.grid)])
    return preds, times


def evaluate_model(cfg: ExperimentConfig, model: Detector, store: FrameStore, dataset: str | None = None) -> EvalReport:
    samples = enumerate_samples(store.frames, eval_sampler(cfg.sampler), epoch_rng(cfg.sampler.seed, 0))
    preds, times = predict(model, cfg, store, samples)
    gts = [[b for b in s.target_boxes if in_grid(b, cfg.grid)] for s in samples]
    report = evaluate(preds, gts, cfg.eval, model=cfg.model, dataset=dataset or cfg.dataset.name)
    report.sec_per_iteration = float(np.mean(times))
    report.sec_per_iteration_std = float(np.std(times))
    return report


def benchmark_model(cfg: ExperimentConfig, model: Detector, store: FrameStore):
    samples = enumerate_samples(store.frames, eval_sampler(cfg.sampler), epoch_rng(cfg.sampler.seed, 0))
    inputs = [store.clouds(s) for s in samples]

    def run(clouds):
        with no_grad():
            return model(model.prepare(clouds))

    return benchmark_inference(run, inputs, cfg.eval.bench_warmup, cfg.eval.bench_iters)


def inspect_augmentation(cfg: ExperimentConfig, frames: Sequence[FrameRecord], epoch: int = 0) -> dict:
    """The frame-index tuples and gap histogram the sampler produces for one epoch."""
    samples = enumerate_samples(frames, cfg.sampler, epoch_rng(cfg.sampler.seed, epoch))
    hist = gap_histogram(samples)
    total = sum(hist.values())
    return {
        "epoch": epoch,
        "offset_enabled": cfg.sampler.offset_enabled,
        "max_skip": cfg.sampler.max_skip,
        "sq": cfg.sampler.sq,
        "indices": [list(s.indices) for s in samples],
        "gap_histogram": {str(k): v for k, v in hist.items()},
        "gap_fraction": {str(k): v / total for k, v in hist.items()} if total else {},
    }


def resolve_manifest(cfg: ExperimentConfig) -> Path:
    if cfg.dataset.manifest is not None:
        if not Path(cfg.dataset.manifest).is_file():
            raise ConfigError(f"dataset.manifest: {cfg.dataset.manifest} does not exist")
        return Path(cfg.dataset.manifest)
    default = Path(cfg.out_dir) / "drive" / "manifest.json"
    if default.is_file():
        return default
    raise ConfigError("dataset.manifest: not set and no synthesized drive found (run synth first)")


def resolve_eval_manifest(cfg: ExperimentConfig) -> Path:
    if cfg.eval_manifest is None:
        return resolve_manifest(cfg)
    if not Path(cfg.eval_manifest).is_file():
        raise ConfigError(f"eval_manifest: {cfg.eval_manifest} does not exist")
    return Path(cfg.eval_manifest)


def write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
