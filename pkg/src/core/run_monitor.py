"""
Calibration Run Monitoring
Structured JSONL events for tracking stage timing, counts and failures
"""

import logging
import json
import time
from datetime import datetime, timezone
from typing import Dict, Any, Optional
from pathlib import Path

logger = logging.getLogger(__name__)


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat().replace("+00:00", "Z")


class CalibrationMonitor:
    """Record calibration runs as one JSON object per line"""

    def __init__(self, log_file: str = "logs/calibration_runs.jsonl"):
        """
        Initialize run monitor

        Args:
            log_file: Path to the JSONL event file
        """
        self.log_file = log_file
        self.current_run: Optional[Dict[str, Any]] = None

        Path(log_file).parent.mkdir(parents=True, exist_ok=True)

        # Setup dedicated monitor logger
        self.monitor_logger = logging.getLogger("calibration_monitor")
        self.monitor_logger.setLevel(logging.INFO)

        handler = logging.FileHandler(log_file)
        handler.setLevel(logging.INFO)
        handler.setFormatter(logging.Formatter('%(message)s'))

        # Remove existing handlers and add new one
        for old in self.monitor_logger.handlers:
            old.close()
        self.monitor_logger.handlers = []
        self.monitor_logger.addHandler(handler)
        self.monitor_logger.propagate = False

    def start_run(self, command: str, seed: int, out_dir: Optional[str] = None) -> str:
        """
        Start tracking a CLI run

        Returns:
            Run ID
        """
        run_id = f"{datetime.now(timezone.utc).timestamp()}"
        self.current_run = {
            "run_id": run_id,
            "command": command,
            "seed": seed,
            "out_dir": out_dir,
            "start_time": time.time(),
            "stages": [],
            "errors": [],
        }
        self._log_event("run_start", {"command": command, "seed": seed, "out_dir": out_dir})
        return run_id

    def start_stage(self, stage: str):
        if not self.current_run:
            return
        self.current_run["stage_start"] = time.time()
        self._log_event("stage_start", {"stage": stage})

    def end_stage(self, stage: str, counts: Optional[Dict[str, Any]] = None):
        """
        Log stage completion

        Args:
            stage: Stage name
            counts: Stage-specific sizes (peaks, columns, inliers, ...)
        """
        if not self.current_run:
            return
        started = self.current_run.pop("stage_start", time.time())
        data = {
            "stage": stage,
            "duration_ms": round((time.time() - started) * 1000, 2),
            "counts": counts or {},
        }
        self.current_run["stages"].append(data)
        self._log_event("stage_end", data)

    def log_error(self, error_type: str, error_message: str, context: Optional[Dict[str, Any]] = None):
        if not self.current_run:
            return
        error_data = {
            "error_type": error_type,
            "error_message": error_message,
            "context": context or {},
        }
        self.current_run["errors"].append(error_data)
        self._log_event("error", error_data)

    def end_run(self, success: bool, exit_code: int = 0):
        """End the run and log its summary"""
        if not self.current_run:
            return
        duration = time.time() - self.current_run["start_time"]
        self._log_event("run_end", {
            "command": self.current_run["command"],
            "status": "completed" if success else "failed",
            "exit_code": exit_code,
            "duration_seconds": round(duration, 2),
            "stages": len(self.current_run["stages"]),
            "errors": len(self.current_run["errors"]),
        })
        self.current_run = None

    def _log_event(self, event_type: str, data: Dict[str, Any]):
        log_entry = {
            "event": event_type,
            "run_id": self.current_run["run_id"] if self.current_run else None,
            "timestamp": _utc_now(),
            "data": data,
        }
        self.monitor_logger.info(json.dumps(log_entry))

    def close(self):
        for handler in self.monitor_logger.handlers:
            handler.close()
        self.monitor_logger.handlers = []


# Global monitor instance
_global_monitor: Optional[CalibrationMonitor] = None


def get_monitor(log_file: Optional[str] = None) -> CalibrationMonitor:
    """Get global monitor instance, reopening it when a different file is requested"""
    global _global_monitor
    if _global_monitor is None or (log_file and log_file != _global_monitor.log_file):
        if _global_monitor is not None:
            _global_monitor.close()
        _global_monitor = CalibrationMonitor(log_file or "logs/calibration_runs.jsonl")
    return _global_monitor
