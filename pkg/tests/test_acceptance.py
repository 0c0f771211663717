"""Acceptance gate: one test per criterion, each printing a single PASS/FAIL line.

Criterion 6 trains twelve detectors and dominates the runtime (roughly a
quarter of an hour on one core); everything else finishes in about a minute.
"""

import json
import math
import statistics
import time

import numpy as np
import pytest

from pillarseq.cli import main
from pillarseq.config import EvalConfig, GridSpec, NetConfig, SynthSceneParams, WeatherParams, build_config
from pillarseq.detection_eval import (
    EvalReport, average_precision, benchmark_inference, bev_iou, evaluate, parse_table, render_table,
)
from pillarseq.experiment import evaluate_model, load_frames, train_model
from pillarseq.fusion import (
    CellMlp, ConvLstmCell, ConvLstmState, concat_clouds, convlstm_cell, convlstm_net, detection_loss, fc_forward,
)
from pillarseq.pointcloud_io import Box3D, PointCloud
from pillarseq.tensor_nn import (
    bce_with_logits, channel_affine, check_gradients, concat, conv2d, linear, max_over_points,
    mul, relu, reshape, scale, scatter_cells, sigmoid, slice_axis0, smooth_l1, sub, tanh,
)
from pillarseq.weather_sim import corrupt, generate_drive


@pytest.fixture
def report(capsys):
    def emit(n: int, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\n[criterion {n}] {'PASS' if ok else 'FAIL'}: {detail}")
    return emit


# 1. gradient correctness -------------------------------------------------------

def _gradient_cases(seed: int):
    """(name, build, arrays) for every differentiable operator at a seed-dependent shape."""
    r = np.random.default_rng(seed)
    n, d, o = (int(v) for v in r.integers(1, 5, 3))
    h, w = (int(v) for v in r.integers(2, 6, 2))
    c = int(r.integers(1, 4))
    off_kink = lambda shape: np.where(np.abs(v := r.standard_normal(shape)) < 0.05, 0.2, v)
    occ = r.integers(0, 4, size=n)
    cells = r.choice(h * w, size=n, replace=False)
    coords = np.column_stack([cells % w, cells // w])
    t = (r.random((c, h, w)) > 0.5).astype(float)
    tgt = r.standard_normal((c, h, w))
    pred = tgt + r.choice([-1, 1], (c, h, w)) * r.choice([0.3, 2.0], (c, h, w))
    k = int(r.choice([1, 3]))
    stride = int(r.choice([1, 2]))
    mlp = CellMlp(2 * c, 3, c, r)
    grid = GridSpec(x_min=0, x_max=w, y_min=0, y_max=h, pillar_dx=1, pillar_dy=1)
    net = NetConfig(prior_dims=[[2.0, 1.0, 1.0]], prior_z=0.0)
    boxes = [Box3D(r.uniform(0, w), r.uniform(0, h), 0.0, 2.0, 1.0, 1.0, r.uniform(-3, 3))]
    return [
        ("linear", lambda x: linear(*x), [r.standard_normal((n, d)), r.standard_normal((d, o)), r.standard_normal(o)]),
        ("conv2d", lambda x: conv2d(*x, stride=stride),
         [r.standard_normal((c, h, w)), r.standard_normal((o, c, k, k)), r.standard_normal(o)]),
        ("relu", lambda x: relu(x[0]), [off_kink((n, d))]),
        ("sigmoid", lambda x: sigmoid(x[0]), [r.standard_normal((n, d))]),
        ("tanh", lambda x: tanh(x[0]), [r.standard_normal((n, d))]),
        ("max_over_points", lambda x: max_over_points(x[0], occ),
         [r.permutation(n * 3 * d).reshape(n, 3, d) * 0.1 + r.random((n, 3, d)) * 0.01]),
        ("concat", lambda x: concat(x, axis=1), [r.standard_normal((n, d)), r.standard_normal((n, o))]),
        ("channel_affine", lambda x: channel_affine(*x), [r.standard_normal((c, h, w)), r.standard_normal(c),
                                                          r.standard_normal(c)]),
        ("scatter_cells", lambda x: scatter_cells(x[0], coords, h, w), [r.standard_normal((n, d))]),
        ("elementwise", lambda x: reshape(slice_axis0(sub(mul(x[0], x[1]), scale(x[0], 0.5)), 0, 1), (-1,)),
         [r.standard_normal((n, d)), r.standard_normal((n, d))]),
        ("bce_with_logits", lambda x: bce_with_logits(x[0], t, 1 + t), [r.standard_normal((c, h, w))]),
        ("smooth_l1", lambda x: smooth_l1(x[0], tgt), [pred]),
        ("fc_forward+mlp", lambda x: fc_forward(x, mlp), [r.standard_normal((c, h, w)) for _ in range(2)]),
        ("convlstm_cell x2", _two_step_lstm, [r.standard_normal((c, h, w)), r.standard_normal((c, h, w)),
                                              0.3 * r.standard_normal((8, c + 2, 3, 3)), 0.3 * r.standard_normal(8)]),
        ("convlstm_net", _lstm_net(c, r), [r.standard_normal((c, h, w)) for _ in range(2)]),
        ("detection_loss", lambda x: detection_loss(x[0], boxes, grid, net), [0.3 * r.standard_normal((9, h, w))]),
    ]


def _two_step_lstm(x):
    a1, a2, kernel, bias = x
    hid = kernel.shape[0] // 4
    h, s = convlstm_cell(a1, ConvLstmState.zeros(hid, *a1.shape[1:]), kernel, bias)
    return convlstm_cell(a2, s, kernel, bias)[0]


def _lstm_net(c, r):
    cells = [ConvLstmCell(c, 2, r), ConvLstmCell(2, 2, r)]
    return lambda xs: convlstm_net(xs, cells)


def test_criterion_1_gradient_correctness(report):
    t0 = time.perf_counter()
    worst: dict[str, float] = {}
    for seed in range(5):
        for name, build, arrays in _gradient_cases(seed):
            worst[name] = max(worst.get(name, 0.0), check_gradients(build, arrays, eps=1e-5, seed=seed))
    elapsed = time.perf_counter() - t0
    bad = {k: v for k, v in worst.items() if v >= 1e-4}
    ok = not bad and elapsed < 120
    report(1, ok, f"{len(worst)} operators x 5 shapes, max rel err {max(worst.values()):.2e}, {elapsed:.1f}s"
                  + (f", failing {bad}" if bad else ""))
    assert ok


# 2. concatenation algebra ------------------------------------------------------

def test_criterion_2_concatenation_algebra(report):
    r = np.random.default_rng(2)
    failures = 0
    for _ in range(1000):
        m, n = (int(v) for v in r.integers(0, 40, 2))
        p1 = PointCloud(np.column_stack([r.uniform(-20, 20, (m, 3)), r.uniform(0, 1, m)]))
        p2 = PointCloud(np.column_stack([r.uniform(-20, 20, (n, 3)), r.uniform(0, 1, n)]))
        ic = concat_clouds([p1, p2])
        icp = concat_clouds([p1, p2], with_encoding=True)
        flags = icp.data[:, 4]
        ok = (
            len(ic) == m + n
            and np.array_equal(ic.data[:m], p1.data) and np.array_equal(ic.data[m:], p2.data)
            and np.array_equal(icp.data[:, :4], ic.data)
            and int((flags == 0).sum()) == m and int((flags == 1).sum()) == n
        )
        failures += not ok
    report(2, failures == 0, f"1000 random pairs, {failures} violations")
    assert failures == 0


# 3. evaluation oracle ----------------------------------------------------------

def _mc_iou(a, b, n, r):
    corners = np.vstack([a.corners_bev(), b.corners_bev()])
    pts = r.uniform(corners.min(axis=0), corners.max(axis=0), size=(n, 2))

    def inside(bx):
        c, s = math.cos(bx.yaw), math.sin(bx.yaw)
        d = pts - np.array([bx.cx, bx.cy])
        return (np.abs(d[:, 0] * c + d[:, 1] * s) <= bx.l / 2) & (np.abs(-d[:, 0] * s + d[:, 1] * c) <= bx.w / 2)

    ia, ib = inside(a), inside(b)
    union = int((ia | ib).sum())
    p = (ia & ib).sum() / union
    return p, math.sqrt(p * (1 - p) / union)


def test_criterion_3_evaluation_oracle(report):
    r = np.random.default_rng(3)
    misses = 0
    for _ in range(100):
        a, b = (Box3D(r.uniform(-1, 1), r.uniform(-1, 1), 0, r.uniform(0.5, 4), r.uniform(0.5, 4), 1.5,
                      r.uniform(-math.pi, math.pi)) for _ in range(2))
        est, se = _mc_iou(a, b, 200_000, r)
        misses += abs(bev_iou(a, b) - est) > 3 * se + 1e-12
    ap = average_precision([0.9, 0.8, 0.7], [True, False, True], 2)
    gts = [[Box3D(r.uniform(-10, 10), r.uniform(-10, 10), 0, 4, 1.8, 1.5, r.uniform(-3, 3)) for _ in range(3)]
           for _ in range(10)]
    preds = [[Box3D(g.cx, g.cy, g.cz, g.l, g.w, g.h, g.yaw, g.class_id, 1.0) for g in f] for f in gts]
    perfect = evaluate(preds, gts, EvalConfig()).mAP
    ok = misses == 0 and ap == 5 / 6 and perfect == {0.5: 1.0, 0.75: 1.0}
    report(3, ok, f"MC misses {misses}/100, worked AP {ap!r} (5/6={5 / 6!r}), perfect mAP {perfect}")
    assert ok


# 4. determinism ----------------------------------------------------------------

def test_criterion_4_determinism(report, tmp_path):
    cfg = tmp_path / "exp.json"
    cfg.write_text(json.dumps({
        "model": "LSTM*", "seed": 11,
        "sampler": {"sq": 2, "max_skip": 2},
        "grid": {"x_min": -10, "x_max": 10, "y_min": -10, "y_max": 10, "max_pillars": 256},
        "net": {"filter_factor": 2, "pillar_channels": 8, "backbone_channels": [8, 8], "epochs": 2},
        "dataset": {"synth": {"n_frames": 12, "n_objects": 3, "extent": [-9, 9, -9, 9]}},
    }))
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 0
    manifest = f"dataset.manifest=\"{tmp_path / 'd' / 'drive' / 'manifest.json'}\""
    blobs, hists = [], []
    for name in ("a", "b"):
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path / name), "--set", manifest]) == 0
        blobs.append((tmp_path / name / "checkpoint.bin").read_bytes())
        assert main(["inspect", "--config", str(cfg), "--out", str(tmp_path / name), "--set", manifest]) == 0
        hists.append(json.loads((tmp_path / name / "inspect.json").read_text()))
    assert main(["inspect", "--config", str(cfg), "--out", str(tmp_path / "plain"), "--set", manifest,
                 "--set", "model=\"LSTM\""]) == 0
    plain = json.loads((tmp_path / "plain" / "inspect.json").read_text())
    ok = blobs[0] == blobs[1] and hists[0] == hists[1] and plain["gap_fraction"] == {"1": 1.0}
    report(4, ok, f"checkpoints identical={blobs[0] == blobs[1]}, inspect identical={hists[0] == hists[1]}, "
                  f"offset-disabled gaps={plain['gap_fraction']}")
    assert ok


# 5. synthetic overfit ----------------------------------------------------------

def test_criterion_5_synthetic_overfit(report, tmp_path):
    t0 = time.perf_counter()
    cfg = build_config({
        "model": "PBOD", "seed": 0,
        "net": {"filter_factor": 2, "epochs": 150},
    })
    assert (cfg.grid.nx, cfg.grid.ny) == (32, 32)
    _, manifest = generate_drive(SynthSceneParams(n_frames=50), tmp_path / "drive", seed=0)
    store = load_frames(manifest)
    model = train_model(cfg, store)
    m50 = evaluate_model(cfg, model, store).mAP[0.5]
    elapsed = time.perf_counter() - t0
    ok = m50 >= 0.9 and elapsed < 15 * 60
    report(5, ok, f"Baseline FF=2 on 32x32 grid, 50 clear frames: train mAP(0.5)={m50:.3f}, {elapsed:.0f}s")
    assert ok


# 6. directional reproduction ---------------------------------------------------

DIRECTIONAL_SEEDS = (0, 1, 2)
DIRECTIONAL_WEATHER = dict(backscatter_rate=150, backscatter_range=8, dropout_prob_at_max_range=0.6,
                           intensity_noise_sigma=0.05)
# training drive sampled at the nominal rate; held-out drive with randomized frame intervals
TRAIN_SCENE = SynthSceneParams(n_frames=100, max_interval_multiple=1)
HELD_OUT_SCENE = SynthSceneParams(n_frames=100, max_interval_multiple=4)
DIRECTIONAL_NET = {"filter_factor": 2, "epochs": 30}
DIRECTIONAL_SAMPLER = {"sq": 2, "max_skip": 3}


def directional_run(tmp_path, seeds=DIRECTIONAL_SEEDS, labels=("FC", "FC*", "LSTM", "LSTM*")):
    scores = {m: [] for m in labels}
    for seed in seeds:
        wp = WeatherParams(**DIRECTIONAL_WEATHER, seed=seed)
        _, man_train = generate_drive(TRAIN_SCENE, tmp_path / f"s{seed}" / "train", seed=1000 + seed, weather=wp)
        _, man_test = generate_drive(HELD_OUT_SCENE, tmp_path / f"s{seed}" / "test", seed=2000 + seed, weather=wp)
        train, held_out = load_frames(man_train), load_frames(man_test)
        for label in labels:
            cfg = build_config({"model": label, "seed": seed, "net": DIRECTIONAL_NET, "sampler": DIRECTIONAL_SAMPLER})
            model = train_model(cfg, train)
            scores[label].append(evaluate_model(cfg, model, held_out).mAP[0.5])
    return scores


def test_criterion_6_directional_reproduction(report, tmp_path):
    t0 = time.perf_counter()
    scores = directional_run(tmp_path)
    med = {m: statistics.median(v) for m, v in scores.items()}
    ok = med["FC*"] > med["FC"] and med["LSTM*"] > med["LSTM"]
    detail = ", ".join(f"{m} {med[m]:.3f} {np.round(scores[m], 3).tolist()}" for m in scores)
    report(6, ok, f"median held-out mAP(0.5) over seeds {list(DIRECTIONAL_SEEDS)}: {detail}; "
                  f"{time.perf_counter() - t0:.0f}s")
    assert ok


# 7. timing harness -------------------------------------------------------------

def test_criterion_7_timing_harness(report):
    res = benchmark_inference(lambda _: time.sleep(0.010), [None], warmup=3, iters=20)
    table = render_table([EvalReport(model="FC*", dataset="Synthetic", mAP={0.5: 0.5, 0.75: 0.1},
                                     sec_per_iteration=res.mean)])
    cols = list(parse_table(table)[0])
    ok = 0.009 <= res.mean <= 0.025 and cols == ["Model", "Dataset", "sec/it", "mAP (0.5)", "mAP (0.75)"]
    report(7, ok, f"10 ms stub mean {1000 * res.mean:.2f} ms over 20 iters; columns {cols}")
    assert ok


# 8. weather invariants ---------------------------------------------------------

def test_criterion_8_weather_invariants(report):
    r = np.random.default_rng(8)
    cloud = PointCloud(np.column_stack([r.uniform(-25, 25, (500, 3)), r.uniform(0, 1, 500)]))
    identity = np.array_equal(corrupt(cloud, WeatherParams(), r).data, cloud.data)
    wp = WeatherParams(backscatter_rate=50, backscatter_range=6.0, sensor_origin=(1.0, -2.0, 0.5))
    empty = PointCloud(np.zeros((0, 4)))
    outs = [corrupt(empty, wp, r) for _ in range(1000)]
    counts = np.array([len(o) for o in outs])
    z = abs(counts.mean() - 50) / math.sqrt(50 / 1000)
    pts = np.concatenate([o.data[:, :3] for o in outs]).astype(np.float64)
    max_dist = float(np.linalg.norm(pts - np.array(wp.sensor_origin), axis=1).max())
    ok = identity and z < 3 and max_dist <= wp.backscatter_range
    report(8, ok, f"identity={identity}, Poisson mean {counts.mean():.2f} (z={z:.2f}), "
                  f"max noise distance {max_dist:.4f} <= {wp.backscatter_range}")
    assert ok
