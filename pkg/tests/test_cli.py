import json

import numpy as np
import pytest

from mitokit import cli
from mitokit.catalog import ingest_manifest, write_manifest
from mitokit.ema import CheckpointSnapshot, save_checkpoint
from mitokit.evaluator import Detection, DetectionSet, write_detections
from mitokit.synth import synthetic_catalog


@pytest.fixture
def manifest(tmp_path):
    path = tmp_path / "m.jsonl"
    write_manifest(synthetic_catalog(seed=0, scale=0.2), path)
    return path


def run(*args):
    return cli.main([str(a) for a in args])


def reports(out, command):
    return sorted(p for p in out.glob(f"{command}-*.json") if p.name.count(".") == 1)


def report_body(path):
    doc = json.loads(path.read_text())
    doc.pop("header")
    return doc


class TestExitCodes:
    def test_missing_seed(self, manifest, tmp_path):
        assert run("recount", "--manifest", manifest, "--out-dir", tmp_path) == cli.EXIT_CONFIG

    def test_missing_manifest(self, tmp_path):
        assert run("recount", "--seed", 0, "--manifest", tmp_path / "nope", "--out-dir", tmp_path) == cli.EXIT_CONFIG

    def test_data_error(self, tmp_path):
        bad = tmp_path / "bad.jsonl"
        bad.write_text("{oops\n")
        assert run("ingest", "--seed", 0, "--manifest", bad, "--out-dir", tmp_path) == cli.EXIT_DATA

    def test_integrity_error(self, tmp_path):
        bad = tmp_path / "bad.jsonl"
        bad.write_text('{"kind": "slide", "id": "s", "dataset_id": "ghost"}\n')
        assert run("ingest", "--seed", 0, "--manifest", bad, "--out-dir", tmp_path) == cli.EXIT_INTEGRITY

    def test_unknown_config_key(self, tmp_path, manifest):
        cfg = tmp_path / "c.json"
        cfg.write_text('{"seed": 1, "nonsense": 2}')
        assert run("recount", "--config", cfg, "--manifest", manifest, "--out-dir", tmp_path) == cli.EXIT_CONFIG

    def test_external_detections_mine(self, tmp_path, manifest):
        cat = ingest_manifest(manifest)
        pid = sorted(cat.patches)[0]
        dets = tmp_path / "d.jsonl"
        write_detections([DetectionSet(pid, (Detection(1, 1, 0.5),), "m")], dets)
        assert run("mine", "--seed", 0, "--manifest", manifest, "--detections", dets,
                   "--out-dir", tmp_path) == cli.EXIT_OK

    def test_partial_failure(self, tmp_path, manifest, monkeypatch):
        class Broken:
            model_id = "broken"

            def detect(self, patch, view=None, pixels=None):
                if patch.id.endswith("0"):
                    raise RuntimeError("inference failed")
                return DetectionSet(patch.id, (Detection(8, 8, 0.9),), self.model_id)

        monkeypatch.setattr(cli, "_mock_detectors", lambda catalog, cfg: [Broken()])
        assert run("mine", "--seed", 0, "--manifest", manifest, "--out-dir", tmp_path) == cli.EXIT_PARTIAL
        body = report_body(reports(tmp_path, "mine")[0])
        assert body["result"]["failures"]
        assert body["result"]["summary"]["n_mined"] > 0


class TestConfigPrecedence:
    def test_env_file_then_flags(self, tmp_path, manifest, monkeypatch):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"seed": 3, "split": {"k": 4}}))
        monkeypatch.setenv(cli.CONFIG_ENV, str(cfg))
        out = tmp_path / "out"
        assert run("split", "--manifest", manifest, "--out-dir", out) == 0
        body = report_body(reports(out, "split")[0])
        assert body["config"]["seed"] == 3 and body["config"]["split"]["k"] == 4
        assert run("split", "--manifest", manifest, "--out-dir", out, "--k", 3) == 0
        ks = sorted(report_body(p)["config"]["split"]["k"] for p in reports(out, "split"))
        assert ks == [3, 4]


class TestReproducible:
    @pytest.mark.parametrize("command,extra", [
        ("split", ["--strata-key", "tumor:"]),
        ("sample", ["--n-batches", "3", "--dump-plan"]),
        ("end2end", ["--views", "identity,hflip", "--k", "3"]),
        ("mine", []),
    ])
    def test_rerun_identical(self, tmp_path, manifest, command, extra):
        args = [command, "--seed", 7, "--manifest", manifest, "--out-dir", tmp_path, *extra]
        assert run(*args) == 0
        before = {p.name: p.read_bytes() for p in tmp_path.glob(f"{command}-*")}
        assert run(*args) == 0
        after = {p.name: p.read_bytes() for p in tmp_path.glob(f"{command}-*")}
        assert before == after

    def test_refuses_conflicting_overwrite(self, tmp_path, manifest):
        args = ["split", "--seed", 7, "--manifest", manifest, "--out-dir", tmp_path]
        assert run(*args) == 0
        folds = next(tmp_path.glob("split-*.folds.json"))
        folds.write_text("{}")
        assert run(*args) == cli.EXIT_INTEGRITY


class TestCommands:
    def test_fuse_and_evaluate(self, tmp_path, manifest):
        cat = ingest_manifest(manifest)
        pid = next(p for p in sorted(cat.patches) if cat.mf_points(p))
        x, y = cat.mf_points(pid)[0].center_xy
        from mitokit.tta import GeomTransform, transform_point

        view = GeomTransform("rot90", cat.patches[pid].size_wh)
        vx, vy = transform_point(view, (x, y))
        dets = tmp_path / "d.jsonl"
        write_detections([
            DetectionSet(pid, (Detection(x, y, 0.9),), "m", "identity"),
            DetectionSet(pid, (Detection(vx, vy, 0.7),), "m", "rot90"),
        ], dets)
        out = tmp_path / "out"
        assert run("fuse", "--seed", 0, "--manifest", manifest, "--detections", dets, "--out-dir", out) == 0
        fused = next(out.glob("fuse-*.fused.jsonl"))
        rows = [json.loads(l) for l in fused.read_text().splitlines()]
        assert len(rows) == 1 and rows[0]["confidence"] == pytest.approx(0.8)
        assert run("evaluate", "--seed", 0, "--manifest", manifest, "--detections", fused,
                   "--thresholds", "0.5,0.9", "--out-dir", out) == 0
        body = report_body(reports(out, "evaluate")[0])
        assert body["result"]["report"]["overall"]["tp"] == 1
        assert [r["tp"] for r in body["result"]["sweep"]] == [1, 0]

    def test_ema(self, tmp_path):
        ck = tmp_path / "ck"
        ck.mkdir()
        for step, loss in enumerate([0.5, 0.2, 0.3]):
            save_checkpoint(CheckpointSnapshot(step, {"w": np.full(2, step, np.float32)}, loss), ck / f"{step}.ckpt")
        out = tmp_path / "out"
        assert run("ema", "--seed", 0, "--checkpoints", ck, "--out-dir", out) == 0
        body = report_body(reports(out, "ema")[0])
        assert set(body["result"]["ensemble"]) == {"raw", "ema_0.001", "ema_0.0005", "ema_0.00025"}
        assert all(v["step"] == 1 for v in body["result"]["ensemble"].values())

    def test_bench_keeps_timings_in_header(self, tmp_path):
        args = ["bench", "--seed", 0, "--n-patches", 50, "--out-dir", tmp_path]
        assert run(*args) == 0
        assert run(*args) == 0
        doc = json.loads(reports(tmp_path, "bench")[0].read_text())
        assert "overhead_ms_per_patch" in doc["header"]["volatile"]

    def test_synth_ingest_recount(self, tmp_path):
        m = tmp_path / "syn.jsonl"
        assert run("synth", "--seed", 1, "--scale", 0.1, "--out-manifest", m, "--out-dir", tmp_path) == 0
        assert run("ingest", "--seed", 1, "--manifest", m, "--out-dir", tmp_path) == 0
        assert run("recount", "--seed", 1, "--manifest", m, "--out-dir", tmp_path) == 0
