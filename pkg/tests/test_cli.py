import json
import time

import pytest

from pdrlab.cli import main
from pdrlab.streams import Segment, read_jsonl

CI_CONFIG = {
    "profiles": [{"kind": "walking", "duration": 60.0}],
    "pipeline": {"n_w": 64},
    "network": {"lstm_cells": 32},
    "train": {"max_epochs": 10, "batch": 64},
    "kf": {"q0_grid": [1.0], "r_pos_grid": [0.03], "r_vel_grid": [1.0]},
    "experiment": {"design": "recal", "seeds": 2,
                   "scale": {"train_activities": ["walking"], "train_duration": 30.0, "test_duration": 30.0,
                             "n_w": 32},
                   "options": {"intervals": [30.0, "inf"], "estimators": ["classic"]}},
}


def write_config(tmp_path, doc, name="scenario.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return path


def run(tmp_path, *argv, config=CI_CONFIG, out="out"):
    cfg = write_config(tmp_path, config)
    return main(["--config", str(cfg), "--out", str(tmp_path / out), *argv])


def test_simulate_writes_parseable_streams(tmp_path, capsys):
    assert run(tmp_path, "simulate") == 0
    stream_dir = tmp_path / "out" / "streams"
    jsonl = sorted(stream_dir.glob("*.jsonl"))
    assert [p.name for p in jsonl] == ["00-walking.jsonl"]
    for line in jsonl[0].read_text().splitlines():
        json.loads(line)
    assert read_jsonl(jsonl[0])
    assert (stream_dir / "00-walking.ref.csv").exists()
    assert (stream_dir / "manifest.json").exists()
    assert "radio_pos=601" in capsys.readouterr().out


def test_simulate_is_byte_deterministic(tmp_path):
    assert run(tmp_path, "simulate", out="a") == 0
    assert run(tmp_path, "simulate", out="b") == 0
    for f in (tmp_path / "a" / "streams").iterdir():
        if f.name != "manifest.json":
            assert f.read_bytes() == (tmp_path / "b" / "streams" / f.name).read_bytes()


def test_negative_noise_is_config_error_naming_field(tmp_path, capsys):
    bad = {**CI_CONFIG, "noise": {"radio_pos_std": -0.1}}
    assert run(tmp_path, "simulate", config=bad) == 1
    assert "noise.radio_pos_std" in capsys.readouterr().err


def test_unknown_key_is_config_error(tmp_path, capsys):
    assert run(tmp_path, "simulate", config={**CI_CONFIG, "pipline": {}}) == 1
    assert "pipline" in capsys.readouterr().err


def test_missing_upstream_artifact_is_io_error_with_path(tmp_path, capsys):
    assert run(tmp_path, "pipeline") == 2
    err = capsys.readouterr().err
    assert str(tmp_path / "out" / "streams") in err


def test_missing_checkpoint_is_io_error(tmp_path, capsys):
    assert run(tmp_path, "simulate") == 0
    assert run(tmp_path, "pipeline") == 0
    assert run(tmp_path, "predict") == 2
    assert "model.ckpt" in capsys.readouterr().err


def test_evaluate_reference_against_itself_is_zero(tmp_path, capsys):
    assert run(tmp_path, "simulate") == 0
    assert run(tmp_path, "pipeline") == 0
    est = tmp_path / "est"
    est.mkdir()
    for seg_csv in sorted((tmp_path / "out" / "segments").glob("*.csv")):
        if seg_csv.name == "windows.csv":
            continue
        ref = Segment.from_csv(seg_csv).ref
        lines = ["t,x,y"] + [f"{float(t)!r},{float(x)!r},{float(y)!r}" for t, (x, y) in zip(ref.t, ref.positions)]
        (est / seg_csv.name).write_text("\n".join(lines) + "\n")
    assert run(tmp_path, "evaluate", "--estimates", str(est)) == 0
    report = json.loads((tmp_path / "out" / "evaluate" / "report.json").read_text())
    pooled = report["pooled"]
    assert pooled["n"] > 0
    assert all(pooled[k] == 0.0 for k in ("mae", "mse", "rmse", "cep95"))
    assert report["config_hash"]


def test_experiment_manifest_replays_identically(tmp_path):
    assert run(tmp_path, "exp") == 0
    exp_dir = tmp_path / "out" / "exp" / "recal"
    summary = json.loads((exp_dir / "summary.json").read_text())
    assert summary["design"] == "recal" and summary["seeds"] == [0, 1]
    assert main(["--verify", "--config", str(exp_dir / "manifest.json")]) == 0


def test_verify_detects_tampered_output(tmp_path, capsys):
    assert run(tmp_path, "exp") == 0
    manifest_path = tmp_path / "out" / "exp" / "recal" / "manifest.json"
    manifest = json.loads(manifest_path.read_text())
    manifest["outputs"]["summary.json"] = "0" * 64
    manifest_path.write_text(json.dumps(manifest))
    assert main(["--verify", "--config", str(manifest_path)]) == 4
    assert "summary.json" in capsys.readouterr().err


def test_toml_config_is_accepted(tmp_path):
    pytest.importorskip("tomli") if __import__("sys").version_info < (3, 11) else None
    path = tmp_path / "s.toml"
    path.write_text('seed = 3\n[[profiles]]\nkind = "jogging"\nduration = 20.0\n')
    assert main(["--config", str(path), "--out", str(tmp_path / "o"), "simulate"]) == 0
    assert (tmp_path / "o" / "streams" / "00-jogging.jsonl").exists()


@pytest.mark.slow
def test_ci_scale_walking_pipeline_end_to_end(tmp_path):
    start = time.monotonic()
    for stage in (["simulate"], ["pipeline"], ["reconstruct"], ["kf", "--tune"], ["train"], ["predict"],
                  ["evaluate", "--skip", "1.0"]):
        assert run(tmp_path, *stage) == 0, stage
    elapsed = time.monotonic() - start
    report = json.loads((tmp_path / "out" / "evaluate" / "report.json").read_text())
    assert report["pooled"]["mae"] < 2.0
    history = (tmp_path / "out" / "model" / "history.csv").read_text().splitlines()
    assert 2 <= len(history) <= 11
    assert elapsed < 300
    model_manifest = tmp_path / "out" / "model" / "manifest.json"
    assert main(["--verify", "--config", str(model_manifest)]) == 0
