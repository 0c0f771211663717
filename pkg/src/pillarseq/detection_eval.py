"""Rotated BEV IoU, greedy matching, average precision, mAP and inference timing."""

from __future__ import annotations

import json
import logging
import math
import statistics
import time
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np

from .config import EvalConfig
from .pointcloud_io import Box3D

log = logging.getLogger(__name__)


# geometry --------------------------------------------------------------------

def polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def clip_polygon(subject: np.ndarray, clipper: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman: part of ``subject`` inside convex CCW ``clipper``."""
    out = [tuple(p) for p in subject]
    n = len(clipper)
    for k in range(n):
        if not out:
            break
        ax, ay = clipper[k]
        bx, by = clipper[(k + 1) % n]
        ex, ey = bx - ax, by - ay

        def side(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        inp, out = out, []
        prev = inp[-1]
        sp = side(prev)
        for cur in inp:
            sc = side(cur)
            if sc >= 0:
                if sp < 0:
                    out.append(_intersect(prev, cur, sp, sc))
                out.append(cur)
            elif sp >= 0:
                out.append(_intersect(prev, cur, sp, sc))
            prev, sp = cur, sc
    return np.array(out, dtype=np.float64).reshape(-1, 2)


def _intersect(p, q, sp, sq):
    t = sp / (sp - sq)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def bev_intersection(a: Box3D, b: Box3D) -> float:
    reach = math.hypot(a.l, a.w) / 2 + math.hypot(b.l, b.w) / 2
    if math.hypot(a.cx - b.cx, a.cy - b.cy) >= reach:
        return 0.0
    return polygon_area(clip_polygon(a.corners_bev(), b.corners_bev()))


def bev_iou(a: Box3D, b: Box3D) -> float:
    inter = bev_intersection(a, b)
    if inter <= 0.0:
        return 0.0
    union = a.l * a.w + b.l * b.w - inter
    return float(min(max(inter / union, 0.0), 1.0))


def iou_3d(a: Box3D, b: Box3D) -> float:
    dz = min(a.cz + a.h / 2, b.cz + b.h / 2) - max(a.cz - a.h / 2, b.cz - b.h / 2)
    if dz <= 0:
        return 0.0
    inter = bev_intersection(a, b) * dz
    if inter <= 0.0:
        return 0.0
    union = a.l * a.w * a.h + b.l * b.w * b.h - inter
    return float(min(max(inter / union, 0.0), 1.0))


def iou_function(mode: str) -> Callable[[Box3D, Box3D], float]:
    return iou_3d if mode == "3d" else bev_iou


# matching and AP -------------------------------------------------------------

def match_and_score(
    preds: Sequence[Box3D],
    gts: Sequence[Box3D],
    threshold: float,
    iou: Callable[[Box3D, Box3D], float] = bev_iou,
) -> tuple[list[bool], list[bool], int]:
    """Greedy matching in the given (confidence-descending) prediction order.

    Returns per-prediction TP and FP flags and the number of unmatched GTs.
    """
    taken = [False] * len(gts)
    tp, fp = [], []
    for p in preds:
        best, best_j = -1.0, -1
        for j, g in enumerate(gts):
            if taken[j] or g.class_id != p.class_id:
                continue
            v = iou(p, g)
            if v > best:
                best, best_j = v, j
        if best_j >= 0 and best >= threshold:
            taken[best_j] = True
            tp.append(True)
            fp.append(False)
        else:
            tp.append(False)
            fp.append(True)
    return tp, fp, taken.count(False)


def precision_recall(scores: Sequence[float], tp_flags: Sequence[bool], n_gt: int) -> tuple[np.ndarray, np.ndarray]:
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    tp = np.asarray(tp_flags, dtype=np.float64)[order]
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    precision = ctp / np.maximum(ctp + cfp, np.finfo(np.float64).eps)
    recall = ctp / n_gt
    return precision, recall


def average_precision(
    scores: Sequence[float], tp_flags: Sequence[bool], n_gt: int, interpolation: str = "all_point"
) -> float:
    """Area under the precision envelope; NaN when there is no ground truth."""
    if n_gt <= 0:
        return float("nan")
    if len(scores) == 0:
        return 0.0
    precision, recall = precision_recall(scores, tp_flags, n_gt)
    if interpolation == "11_point":
        total = 0.0
        for r in np.linspace(0.0, 1.0, 11):
            above = precision[recall >= r]
            total += float(above.max()) if above.size else 0.0
        return total / 11.0
    # Recall rises by 1/n_gt at each true positive, and the envelope there is the best
    # precision j/k_j over this and later true positives (k_j = rank of the j-th one).
    # Summing those rationals exactly keeps hand-checkable values such as 5/6 exact.
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    ranks = np.flatnonzero(np.asarray(tp_flags, dtype=bool)[order]) + 1
    envelope, total = Fraction(0), Fraction(0)
    for j in range(len(ranks) - 1, -1, -1):
        envelope = max(envelope, Fraction(j + 1, int(ranks[j])))
        total += envelope
    return float(total / n_gt)


@dataclass
class EvalReport:
    model: str = ""
    dataset: str = ""
    ap: dict[int, dict[float, float]] = field(default_factory=dict)
    mAP: dict[float, float] = field(default_factory=dict)
    counts: dict[float, dict[str, int]] = field(default_factory=dict)
    sec_per_iteration: float = float("nan")
    sec_per_iteration_std: float = float("nan")

    def to_json(self) -> str:
        def clean(v):
            if isinstance(v, float) and not math.isfinite(v):
                return None
            if isinstance(v, dict):
                return {str(k): clean(x) for k, x in v.items()}
            return v

        return json.dumps(clean(asdict(self)), indent=2, sort_keys=True)


def _in_range(b: Box3D, max_range: float | None) -> bool:
    return max_range is None or math.hypot(b.cx, b.cy) <= max_range


def evaluate(
    preds_per_frame: Sequence[Sequence[Box3D]],
    gts_per_frame: Sequence[Sequence[Box3D]],
    cfg: EvalConfig,
    model: str = "",
    dataset: str = "",
) -> EvalReport:
    """Per-class AP at each IoU threshold, and their mean over classes with ground truth."""
    if len(preds_per_frame) != len(gts_per_frame):
        raise ValueError("predictions and ground truth cover different frame counts")
    iou = iou_function(cfg.iou_mode)
    report = EvalReport(model=model, dataset=dataset)
    for thr in cfg.iou_thresholds:
        report.counts[thr] = {"TP": 0, "FP": 0, "FN": 0}
    for cls in cfg.classes:
        scores: dict[float, list[float]] = {t: [] for t in cfg.iou_thresholds}
        flags: dict[float, list[bool]] = {t: [] for t in cfg.iou_thresholds}
        n_gt = 0
        for preds, gts in zip(preds_per_frame, gts_per_frame):
            g = [b for b in gts if b.class_id == cls and _in_range(b, cfg.max_range)]
            p = [b for b in preds if b.class_id == cls and _in_range(b, cfg.max_range)]
            p.sort(key=lambda b: -(b.confidence or 0.0))
            n_gt += len(g)
            for thr in cfg.iou_thresholds:
                tp, fp, fn = match_and_score(p, g, thr, iou)
                scores[thr].extend(b.confidence or 0.0 for b in p)
                flags[thr].extend(tp)
                c = report.counts[thr]
                c["TP"] += sum(tp)
                c["FP"] += sum(fp)
                c["FN"] += fn
        if n_gt == 0:
            log.warning("class %d has no ground truth; excluded from mAP", cls)
        report.ap[cls] = {
            thr: average_precision(scores[thr], flags[thr], n_gt, cfg.interpolation)
            for thr in cfg.iou_thresholds
        }
    for thr in cfg.iou_thresholds:
        vals = [report.ap[c][thr] for c in cfg.classes if not math.isnan(report.ap[c][thr])]
        report.mAP[thr] = float(np.mean(vals)) if vals else float("nan")
    return report


# timing ----------------------------------------------------------------------

@dataclass
class BenchResult:
    mean: float
    std: float
    samples: list[float]


def benchmark_inference(
    model: Callable, inputs: Sequence, warmup: int = 3, iters: int = 20
) -> BenchResult:
    """Mean wall-clock seconds of single-sequence forward passes, after untimed warmup."""
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if not inputs:
        raise ValueError("benchmark needs at least one input")
    for i in range(warmup):
        model(inputs[i % len(inputs)])
    samples = []
    for i in range(iters):
        x = inputs[i % len(inputs)]
        t0 = time.perf_counter()
        model(x)
        samples.append(time.perf_counter() - t0)
    std = statistics.pstdev(samples) if len(samples) > 1 else 0.0
    return BenchResult(statistics.fmean(samples), std, samples)


# table rendering -------------------------------------------------------------

def _fmt(v: float) -> str:
    return "-" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.3f}"


def table_columns(thresholds: Sequence[float]) -> list[str]:
    return ["Model", "Dataset", "sec/it"] + [f"mAP ({t:g})" for t in thresholds]


def render_table(reports: Sequence[EvalReport], thresholds: Sequence[float] = (0.5, 0.75)) -> str:
    """Aligned text table with the standard results columns."""
    header = table_columns(thresholds)
    rows = [
        [r.model, r.dataset, _fmt(r.sec_per_iteration)] + [_fmt(r.mAP.get(t, float("nan"))) for t in thresholds]
        for r in reports
    ]
    widths = [max(len(h), *(len(row[i]) for row in rows)) if rows else len(h) for i, h in enumerate(header)]
    lines = [" | ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines.append("-+-".join("-" * w for w in widths))
    lines += [" | ".join(c.ljust(w) for c, w in zip(row, widths)) for row in rows]
    return "\n".join(lines) + "\n"


def parse_table(text: str) -> list[dict[str, str]]:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    header = [h.strip() for h in lines[0].split("|")]
    return [dict(zip(header, (c.strip() for c in ln.split("|")))) for ln in lines[2:]]
