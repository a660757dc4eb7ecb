"""
Test the command line: stage chaining through files and exit codes
"""

import json

import numpy as np
import pytest

from src.core import file_io, run_monitor
from src.core.model import Scene
from src.pipeline.cli import _split_evaluate_inputs, build_parser, main


@pytest.fixture(autouse=True)
def clean_environment(monkeypatch):
    for name in ("CALIB_CONFIG_PATH", "CALIB_LOG_LEVEL", "CALIB_MONITOR_FILE"):
        monkeypatch.delenv(name, raising=False)
    monkeypatch.setattr(run_monitor, "_global_monitor", None)


def run(*argv):
    return main([str(a) for a in argv])


def test_parser_defaults():
    args = build_parser().parse_args(["track"])
    assert args.out == "runs/latest"
    assert args.mode == "peaks"
    assert args.input is None


def test_unknown_command_exits():
    with pytest.raises(SystemExit):
        build_parser().parse_args(["solve"])


def test_missing_config_is_a_validation_error(tmp_path):
    assert run("simulate", "--config", tmp_path / "absent.json", "--out", tmp_path) == 2


def test_missing_input_artifact(config_file, tmp_path):
    assert run("calibrate", "--config", config_file, "--out", tmp_path / "empty") == 2


def test_evaluate_count_mismatch(config_file, tmp_path):
    rng = np.random.default_rng(0)
    file_io.write_scene(tmp_path / "a.json", Scene.from_arrays(rng.standard_normal((4, 3)), rng.standard_normal((6, 3))))
    file_io.write_scene(tmp_path / "b.json", Scene.from_arrays(rng.standard_normal((5, 3)), rng.standard_normal((6, 3))))
    code = run("evaluate", "--config", config_file, "--out", tmp_path,
               "--input", tmp_path / "a.json", tmp_path / "b.json")
    assert code == 2


def test_seed_override_changes_simulation(config_file, tmp_path):
    assert run("simulate", "--config", config_file, "--out", tmp_path / "a", "--seed", 5) == 0
    assert run("simulate", "--config", config_file, "--out", tmp_path / "b", "--seed", 5) == 0
    assert run("simulate", "--config", config_file, "--out", tmp_path / "c", "--seed", 6) == 0

    def scene(name):
        return (tmp_path / name / "scene.json").read_bytes()

    assert scene("a") == scene("b")
    assert scene("a") != scene("c")
    assert (tmp_path / "a" / "sim_tdoa_inliers.csv").exists()
    assert not (tmp_path / "a" / "audio.wav").exists()


def test_split_evaluate_inputs(tmp_path):
    (tmp_path / "tdoa.csv").write_text("e1\n0\n", encoding="utf-8")
    (tmp_path / "stages.csv").write_text("stage,pair_i1,pair_i2,frame,w_m\n", encoding="utf-8")
    split = _split_evaluate_inputs([
        "est.json", "truth.json", str(tmp_path / "stages.csv"), str(tmp_path / "tdoa.csv"),
    ])
    assert split["estimated_path"] == "est.json"
    assert split["truth_path"] == "truth.json"
    assert split["tdoa_path"].endswith("tdoa.csv")
    assert split["stages_path"].endswith("stages.csv")


@pytest.mark.slow
def test_simulate_calibrate_evaluate(config_file, tmp_path):
    out = tmp_path / "run"
    assert run("simulate", "--config", config_file, "--out", out) == 0
    assert run("calibrate", "--config", config_file, "--out", out) == 0
    for name in ("calibrated_scene.json", "offsets.json", "calibration_report.json"):
        assert (out / name).exists()

    assert run("evaluate", "--config", config_file, "--out", out) == 0
    report = json.loads((out / "report.json").read_text(encoding="utf-8"))
    assert report["stage"] == "evaluate"
    assert report["config"]["seed"] == 3
    assert report["alignment"]["rmse_m"] < 0.01


@pytest.mark.slow
def test_run_events_recorded(config_doc, tmp_path):
    events_file = tmp_path / "logs" / "runs.jsonl"
    config_doc["logging"]["monitor_file"] = str(events_file)
    config_path = tmp_path / "config.json"
    config_path.write_text(json.dumps(config_doc), encoding="utf-8")

    assert run("pipeline", "--config", config_path, "--out", tmp_path / "run") == 0
    run_monitor._global_monitor.close()

    events = [json.loads(line) for line in events_file.read_text(encoding="utf-8").splitlines()]
    assert events[0]["event"] == "run_start"
    assert events[-1]["event"] == "run_end"
    assert events[-1]["data"]["exit_code"] == 0
    stages = [e["data"]["stage"] for e in events if e["event"] == "stage_end"]
    assert stages == ["simulate", "calibrate", "evaluate"]
