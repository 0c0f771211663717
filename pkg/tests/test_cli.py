import json
import math
import shutil
from dataclasses import replace

import pytest

from pillarseq import experiment
from pillarseq.cli import main
from pillarseq.detection_eval import parse_table, table_columns

SMALL = {
    "model": "PBOD",
    "seed": 3,
    "grid": {"x_min": -10, "x_max": 10, "y_min": -10, "y_max": 10, "pillar_dx": 1.25, "pillar_dy": 1.25,
             "max_points_per_pillar": 8, "max_pillars": 256},
    "net": {"filter_factor": 2, "pillar_channels": 8, "backbone_channels": [8, 8], "epochs": 3},
    "dataset": {"synth": {"n_frames": 20, "n_objects": 3, "extent": [-9, 9, -9, 9], "points_per_object": 40}},
    "eval": {"bench_warmup": 1, "bench_iters": 3},
}


def write_cfg(tmp_path, **updates):
    doc = json.loads(json.dumps(SMALL))
    doc.update(updates)
    path = tmp_path / "exp.json"
    path.write_text(json.dumps(doc))
    return path


def run(cfg, out, *cmd, extra=()):
    return main([cmd[0], "--config", str(cfg), "--out", str(out), *extra])


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """One synthesized and trained Baseline run shared by the read-only checks below."""
    tmp = tmp_path_factory.mktemp("run")
    cfg = write_cfg(tmp)
    out = tmp / "out"
    assert run(cfg, out, "synth") == 0
    assert run(cfg, out, "train") == 0
    return cfg, out


class TestPipeline:
    def test_synth_outputs(self, trained):
        _, out = trained
        assert (out / "drive" / "manifest.json").is_file()
        assert len(list((out / "drive").glob("frame_*.bin"))) == 20
        resolved = json.loads((out / "resolved_config.json").read_text())
        assert resolved["seed"] == 3 and resolved["sampler"]["seed"] == 3

    def test_train_log(self, trained):
        _, out = trained
        lines = [json.loads(ln) for ln in (out / "train_log.jsonl").read_text().splitlines()]
        assert [r["epoch"] for r in lines] == [0, 1, 2]
        assert all(math.isfinite(r["loss"]) for r in lines)
        assert (out / "checkpoint.bin").stat().st_size > 0

    def test_eval_table(self, trained, capsys):
        cfg, out = trained
        assert run(cfg, out, "eval") == 0
        table = (out / "eval_table.txt").read_text()
        rows = parse_table(table)
        assert list(rows[0]) == table_columns([0.5, 0.75])
        assert rows[0]["Model"] == "PBOD"
        report = json.loads((out / "eval_report.json").read_text())
        assert 0.0 <= report["mAP"]["0.5"] <= 1.0
        assert report["sec_per_iteration"] > 0
        assert "mAP (0.5)" in capsys.readouterr().out

    def test_bench(self, trained):
        cfg, out = trained
        assert run(cfg, out, "bench") == 0
        doc = json.loads((out / "bench.json").read_text())
        assert doc["iters"] == 3 and doc["sec/it"] > 0

    def test_inspect_without_offset(self, trained, capsys):
        cfg, out = trained
        assert main(["inspect", "--config", str(cfg), "--out", str(out),
                     "--set", "model=\"FC\"", "--set", "sampler.sq=2", "--set", "sampler.max_skip=3"]) == 0
        doc = json.loads((out / "inspect.json").read_text())
        assert doc["gap_histogram"] == {"1": 19}
        assert doc["gap_fraction"] == {"1": 1.0}
        assert "100.0%" in capsys.readouterr().out

    def test_inspect_with_offset_is_seeded(self, trained, tmp_path):
        cfg, out = trained
        args = ["--set", "model=\"FC*\"", "--set", "sampler.sq=2", "--set", "sampler.max_skip=2"]
        docs = []
        for name in ("a", "b"):
            assert main(["inspect", "--config", str(cfg), "--out", str(tmp_path / name),
                         "--set", f"dataset.manifest=\"{out / 'drive' / 'manifest.json'}\"", *args]) == 0
            docs.append(json.loads((tmp_path / name / "inspect.json").read_text()))
        assert docs[0] == docs[1]
        assert set(docs[0]["gap_histogram"]) <= {"1", "2", "3"}

    def test_eval_with_perfect_predictions(self, trained, monkeypatch):
        cfg, out = trained

        def oracle(model, cfg_, store, samples):
            preds = [[replace(b, confidence=1.0) for b in s.target_boxes if experiment.in_grid(b, cfg_.grid)]
                     for s in samples]
            return preds, [0.001] * len(samples)

        monkeypatch.setattr(experiment, "predict", oracle)
        assert run(cfg, out, "eval") == 0
        report = json.loads((out / "eval_report.json").read_text())
        assert report["mAP"] == {"0.5": 1.0, "0.75": 1.0}


class TestDeterminism:
    def test_train_twice_bit_identical(self, trained, tmp_path):
        cfg, out = trained
        manifest = out / "drive" / "manifest.json"
        blobs = []
        for name in ("a", "b"):
            assert main(["train", "--config", str(cfg), "--out", str(tmp_path / name),
                         "--set", f"dataset.manifest=\"{manifest}\"", "--set", "net.epochs=1"]) == 0
            blobs.append(((tmp_path / name / "checkpoint.bin").read_bytes(),
                          (tmp_path / name / "train_log.jsonl").read_text()))
        assert blobs[0] == blobs[1]

    def test_synth_twice_bit_identical(self, tmp_path):
        cfg = write_cfg(tmp_path, weather={"backscatter_rate": 20, "backscatter_range": 3})
        for name in ("a", "b"):
            assert run(cfg, tmp_path / name, "synth", extra=["--set", "dataset.synth.n_frames=3"]) == 0
        for f in sorted((tmp_path / "a" / "drive").iterdir()):
            assert f.read_bytes() == (tmp_path / "b" / "drive" / f.name).read_bytes()


class TestExitCodes:
    def test_unknown_field(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path)
        assert main(["synth", "--config", str(cfg), "--set", "net.bogus=1", "--out", str(tmp_path)]) == 1
        assert "net.bogus" in capsys.readouterr().err

    def test_bad_model_label(self, tmp_path):
        assert run(write_cfg(tmp_path, model="FC**"), tmp_path, "synth") == 1

    def test_offset_contradiction(self, tmp_path):
        cfg = write_cfg(tmp_path, model="FC", sampler={"sq": 2, "offset_enabled": True})
        assert run(cfg, tmp_path, "inspect") == 1

    def test_missing_config_file(self, tmp_path):
        assert main(["synth", "--config", str(tmp_path / "nope.json")]) == 1

    def test_invalid_json(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text("{not json")
        assert main(["synth", "--config", str(p)]) == 1

    def test_train_without_drive(self, tmp_path):
        assert run(write_cfg(tmp_path), tmp_path / "empty", "train") == 1

    def test_eval_without_checkpoint(self, trained, tmp_path):
        cfg, out = trained
        code = main(["eval", "--config", str(cfg), "--out", str(tmp_path),
                     "--set", f"dataset.manifest=\"{out / 'drive' / 'manifest.json'}\""])
        assert code == 2

    def test_corrupt_frame_is_runtime_error(self, trained, tmp_path):
        cfg, out = trained
        drive = tmp_path / "drive"
        shutil.copytree(out / "drive", drive)
        (drive / "frame_0000.bin").write_bytes(b"\x00" * 7)
        code = main(["train", "--config", str(cfg), "--out", str(tmp_path / "o"),
                     "--set", f"dataset.manifest=\"{drive / 'manifest.json'}\"", "--set", "net.epochs=1"])
        assert code == 2
