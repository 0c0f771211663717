"""``pillarseq {synth|train|eval|bench|inspect} --config <path> [--set key=value ...]``.

Exit codes: 0 success, 1 configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ExperimentConfig, SynthSceneParams, load_config
from .detection_eval import render_table
from .errors import ConfigError, PillarSeqError
from .experiment import (
    benchmark_model, evaluate_model, inspect_augmentation, load_frames, new_model,
    resolve_eval_manifest, resolve_manifest, train_model, write_json,
)
from .tensor_nn import load_checkpoint, save_checkpoint
from .weather_sim import generate_drive

log = logging.getLogger("pillarseq")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def _prepare_out(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "resolved_config.json", cfg.resolved())
    return out


def cmd_synth(cfg: ExperimentConfig) -> Path:
    params = cfg.dataset.synth or SynthSceneParams()
    out = _prepare_out(cfg)
    _, manifest = generate_drive(params, out / "drive", seed=cfg.seed, weather=cfg.weather)
    print(f"wrote {params.n_frames} frames to {manifest}")
    return manifest


def cmd_train(cfg: ExperimentConfig) -> Path:
    store = load_frames(resolve_manifest(cfg))
    out = _prepare_out(cfg)
    log_path = out / "train_log.jsonl"
    with log_path.open("w") as fh:
        def on_epoch(rec: dict) -> None:
            # wall time is excluded so reruns produce identical logs
            rec = {k: v for k, v in rec.items() if k != "seconds"}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
            fh.flush()
            log.info("epoch %d loss %.4f", rec["epoch"], rec["loss"])

        model = train_model(cfg, store, on_epoch)
    ckpt = out / "checkpoint.bin"
    save_checkpoint(model.state_dict(), ckpt)
    print(f"wrote {ckpt}")
    return ckpt


def _load_trained(cfg: ExperimentConfig, checkpoint: str | None):
    ckpt = Path(checkpoint) if checkpoint else Path(cfg.out_dir) / "checkpoint.bin"
    model = new_model(cfg)
    model.load_state_dict(load_checkpoint(ckpt))
    return model


def cmd_eval(cfg: ExperimentConfig, checkpoint: str | None = None):
    model = _load_trained(cfg, checkpoint)
    store = load_frames(resolve_eval_manifest(cfg))
    out = _prepare_out(cfg)
    report = evaluate_model(cfg, model, store)
    (out / "eval_report.json").write_text(report.to_json() + "\n")
    table = render_table([report], cfg.eval.iou_thresholds)
    (out / "eval_table.txt").write_text(table)
    print(table, end="")
    return report


def cmd_bench(cfg: ExperimentConfig, checkpoint: str | None = None):
    model = _load_trained(cfg, checkpoint)
    store = load_frames(resolve_eval_manifest(cfg))
    out = _prepare_out(cfg)
    res = benchmark_model(cfg, model, store)
    doc = {"model": cfg.model, "sec/it": res.mean, "std": res.std, "iters": len(res.samples),
           "warmup": cfg.eval.bench_warmup, "samples": res.samples}
    write_json(out / "bench.json", doc)
    print(f"{cfg.model}: {res.mean:.4f} +- {res.std:.4f} sec/it over {len(res.samples)} iterations")
    return res


def cmd_inspect(cfg: ExperimentConfig, epoch: int = 0) -> dict:
    store = load_frames(resolve_manifest(cfg))
    out = _prepare_out(cfg)
    doc = inspect_augmentation(cfg, store.frames, epoch)
    write_json(out / "inspect.json", doc)
    for gap, frac in doc["gap_fraction"].items():
        print(f"gap={gap}: {doc['gap_histogram'][gap]} ({100 * frac:.1f}%)")
    return doc


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pillarseq", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("synth", "train", "eval", "bench", "inspect"):
        p = sub.add_parser(name)
        p.add_argument("--config", help="experiment config (JSON)")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config field, e.g. net.epochs=5 (repeatable)")
        p.add_argument("--out", help="output directory (overrides out_dir)")
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("eval", "bench"):
            p.add_argument("--checkpoint", help="defaults to <out>/checkpoint.bin")
        if name == "inspect":
            p.add_argument("--epoch", type=int, default=0)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        overrides = list(args.overrides)
        if args.out:
            overrides.append(f"out_dir={json.dumps(args.out)}")
        cfg = load_config(args.config, overrides)
        if args.command == "synth":
            cmd_synth(cfg)
        elif args.command == "train":
            cmd_train(cfg)
        elif args.command == "eval":
            cmd_eval(cfg, args.checkpoint)
        elif args.command == "bench":
            cmd_bench(cfg, args.checkpoint)
        else:
            cmd_inspect(cfg, args.epoch)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (PillarSeqError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
