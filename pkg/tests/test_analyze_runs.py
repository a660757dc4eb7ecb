"""
Test the run log report
"""

from scripts.analyze_runs import RunLogAnalyzer
from src.core.run_monitor import CalibrationMonitor


def record_runs(path):
    monitor = CalibrationMonitor(str(path))
    monitor.start_run("calibrate", seed=1, out_dir="runs/a")
    monitor.start_stage("calibrate")
    monitor.end_stage("calibrate", {"inliers": 30})
    monitor.end_run(True, 0)

    monitor.start_run("calibrate", seed=2, out_dir="runs/b")
    monitor.start_stage("calibrate")
    monitor.log_error("NoConsensus", "best consensus 3 < 7")
    monitor.end_run(False, 3)
    monitor.close()


def test_summary_tables(tmp_path):
    path = tmp_path / "runs.jsonl"
    record_runs(path)
    with open(path, "a", encoding="utf-8") as f:
        f.write("not json\n")

    analyzer = RunLogAnalyzer(str(path))
    assert len(analyzer.events) == 8

    runs = analyzer.run_summary()
    assert runs["exit_code"].tolist() == [0, 3]
    assert runs["seed"].tolist() == [1, 2]
    assert analyzer.stage_timings().loc["calibrate", "count"] == 1
    assert analyzer.error_counts().to_dict() == {"NoConsensus": 1}


def test_report_prints(tmp_path, capsys):
    path = tmp_path / "runs.jsonl"
    record_runs(path)
    RunLogAnalyzer(str(path)).generate_report()
    out = capsys.readouterr().out
    assert "Success rate: 50.0% (1/2)" in out
    assert "NoConsensus: 1" in out


def test_missing_log(tmp_path):
    analyzer = RunLogAnalyzer(str(tmp_path / "absent.jsonl"))
    assert analyzer.events == []
    assert analyzer.run_summary().empty
