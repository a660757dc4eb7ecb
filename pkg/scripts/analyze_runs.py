"""
Calibration Run Log Analysis Tool
Summarize logs/calibration_runs.jsonl: outcomes, stage timings, errors

    python scripts/analyze_runs.py [logs/calibration_runs.jsonl]
"""

import json
import sys
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List

import pandas as pd

# Add project root to path
project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root))


class RunLogAnalyzer:
    """Analyze calibration run events"""

    def __init__(self, log_file: str = "logs/calibration_runs.jsonl"):
        path = Path(log_file)
        self.log_file = path if path.is_absolute() else project_root / path
        self.events: List[Dict[str, Any]] = []
        self.load_logs()

    def load_logs(self):
        """Load and parse the event file, skipping unreadable lines"""
        if not self.log_file.exists():
            print(f"Log file not found: {self.log_file}")
            return

        with open(self.log_file, 'r', encoding='utf-8') as f:
            for line in f:
                try:
                    self.events.append(json.loads(line))
                except json.JSONDecodeError:
                    continue

        print(f"Loaded {len(self.events)} events from {self.log_file}")

    def _frame(self, event_type: str) -> pd.DataFrame:
        rows = [
            {"run_id": e.get("run_id"), "timestamp": e.get("timestamp"), **e.get("data", {})}
            for e in self.events if e.get("event") == event_type
        ]
        return pd.DataFrame(rows)

    def run_summary(self) -> pd.DataFrame:
        """One row per finished run: command, status, exit code, duration"""
        ends = self._frame("run_end")
        if ends.empty:
            return ends
        starts = self._frame("run_start")
        if not starts.empty:
            ends = ends.merge(starts[["run_id", "seed", "out_dir"]], on="run_id", how="left")
        return ends

    def stage_timings(self) -> pd.DataFrame:
        """Duration statistics per stage (ms)"""
        stages = self._frame("stage_end")
        if stages.empty:
            return stages
        return (stages.groupby("stage")["duration_ms"]
                .agg(["count", "mean", "min", "max"])
                .sort_values("mean", ascending=False))

    def error_counts(self) -> pd.Series:
        errors = self._frame("error")
        if errors.empty:
            return pd.Series(dtype=int)
        return errors["error_type"].value_counts()

    def generate_report(self):
        """Print the full report"""
        print("\n" + "=" * 70)
        print("CALIBRATION RUN REPORT")
        print("=" * 70)
        print(f"Log file: {self.log_file}")
        print(f"Generated: {datetime.now().strftime('%Y-%m-%d %H:%M:%S')}")

        runs = self.run_summary()
        print("\nRuns:")
        if runs.empty:
            print("  No finished runs found.")
        else:
            completed = int((runs["status"] == "completed").sum())
            print(f"  Success rate: {100.0 * completed / len(runs):.1f}% ({completed}/{len(runs)})")
            print(f"  Exit codes: {runs['exit_code'].value_counts().to_dict()}")
            print(f"  Duration: mean {runs['duration_seconds'].mean():.2f}s, "
                  f"max {runs['duration_seconds'].max():.2f}s")
            print(runs.groupby("command")["status"].value_counts().unstack(fill_value=0).to_string())

        timings = self.stage_timings()
        print("\nStage timings (ms):")
        print("  No stages recorded." if timings.empty else timings.round(1).to_string())

        errors = self.error_counts()
        print("\nErrors:")
        if errors.empty:
            print("  None")
        for error_type, count in errors.items():
            print(f"  {error_type}: {count}")

        print("\n" + "=" * 70)


def main():
    analyzer = RunLogAnalyzer(*sys.argv[1:2])

    if not analyzer.events:
        print("\nTip: set logging.monitor_file in config.json and run a stage first.")
        return

    analyzer.generate_report()


if __name__ == '__main__':
    main()
