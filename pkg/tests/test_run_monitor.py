"""
Test JSONL run events
"""

import json

from src.core import run_monitor
from src.core.run_monitor import CalibrationMonitor, get_monitor


def read_events(path):
    return [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]


def test_run_lifecycle_written_as_jsonl(tmp_path):
    path = tmp_path / "logs" / "runs.jsonl"
    monitor = CalibrationMonitor(str(path))
    run_id = monitor.start_run("calibrate", seed=4, out_dir="runs/x")
    monitor.start_stage("calibrate")
    monitor.end_stage("calibrate", {"inliers": 12})
    monitor.log_error("NoConsensus", "too few inliers", {"attempt": 1})
    monitor.end_run(False, exit_code=3)
    monitor.close()

    events = read_events(path)
    assert [e["event"] for e in events] == ["run_start", "stage_start", "stage_end", "error", "run_end"]
    assert all(e["run_id"] == run_id for e in events)
    assert events[0]["data"] == {"command": "calibrate", "seed": 4, "out_dir": "runs/x"}
    assert events[2]["data"]["counts"] == {"inliers": 12}
    assert events[2]["data"]["duration_ms"] >= 0
    assert events[-1]["data"]["status"] == "failed"
    assert events[-1]["data"]["exit_code"] == 3
    assert events[-1]["data"]["errors"] == 1


def test_events_ignored_outside_a_run(tmp_path):
    path = tmp_path / "runs.jsonl"
    monitor = CalibrationMonitor(str(path))
    monitor.end_stage("track")
    monitor.log_error("X", "y")
    monitor.end_run(True)
    monitor.close()
    assert read_events(path) == []


def test_get_monitor_reopens_on_new_file(tmp_path, monkeypatch):
    monkeypatch.setattr(run_monitor, "_global_monitor", None)
    first = get_monitor(str(tmp_path / "a.jsonl"))
    assert get_monitor() is first
    assert get_monitor(str(tmp_path / "a.jsonl")) is first
    second = get_monitor(str(tmp_path / "b.jsonl"))
    assert second is not first
    assert second.log_file.endswith("b.jsonl")
    second.close()
