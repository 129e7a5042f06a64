"""
Run-directory storage for configs, metrics, summaries, checkpoints and reports.
"""
import csv
import json
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence

import numpy as np

from seqcomm_dfl.utils.logger import log_error, log_info


class RunStorage:
    """
    Handles saving and loading one run's artifacts inside ``run_dir``.

    Layout:
        effective_config.json, metrics.jsonl, summary.json, error.json, eval.json,
        checkpoints/<tag>.npz
    """

    def __init__(self, run_dir: str):
        """
        Initialize storage, creating the run directory.

        Args:
            run_dir: Directory holding this run's files
        """
        self.run_dir = Path(run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)

        self.config_file = self.run_dir / "effective_config.json"
        self.metrics_file = self.run_dir / "metrics.jsonl"
        self.summary_file = self.run_dir / "summary.json"
        self.error_file = self.run_dir / "error.json"
        self.checkpoint_dir = self.run_dir / "checkpoints"

    # ---------------------------------------------------------------- json
    def save_json(self, name: str, data: Dict[str, Any]) -> bool:
        """
        Write ``data`` to ``run_dir/name``.

        Returns:
            True if successful, False otherwise
        """
        path = self.run_dir / name
        try:
            with open(path, 'w') as f:
                json.dump(_plain(data), f, indent=2)
            log_info(f"Saved {path}", "Storage")
            return True
        except (OSError, TypeError, ValueError) as e:
            log_error(f"Failed to save {path}: {e}", "Storage")
            return False

    def load_json(self, name: str) -> Dict[str, Any]:
        """Read a required JSON artifact; raises if it is missing."""
        with open(self.run_dir / name, 'r') as f:
            return json.load(f)

    def save_config(self, config_dict: Dict[str, Any]) -> bool:
        return self.save_json(self.config_file.name, config_dict)

    def load_config(self) -> Dict[str, Any]:
        return self.load_json(self.config_file.name)

    def save_summary(self, summary: Dict[str, Any]) -> bool:
        return self.save_json(self.summary_file.name, summary)

    def save_error_report(self, error: BaseException, context: Optional[Dict[str, Any]] = None) -> bool:
        """Record a failed run next to its partial outputs."""
        report = {
            "error_type": type(error).__name__,
            "message": str(error),
            "timestamp": datetime.now().isoformat(timespec="seconds"),
            "context": context or {},
        }
        return self.save_json(self.error_file.name, report)

    # -------------------------------------------------------------- metrics
    def append_metrics(self, row: Dict[str, Any]) -> bool:
        """Append one metrics row; the file is flushed after every row."""
        try:
            with open(self.metrics_file, 'a') as f:
                f.write(json.dumps(_plain(row)) + "\n")
                f.flush()
            return True
        except (OSError, TypeError, ValueError) as e:
            log_error(f"Failed to append metrics: {e}", "Storage")
            return False

    def load_metrics(self) -> List[Dict[str, Any]]:
        if not self.metrics_file.exists():
            log_info("No metrics file found, returning empty list", "Storage")
            return []
        with open(self.metrics_file, 'r') as f:
            return [json.loads(line) for line in f if line.strip()]

    # ---------------------------------------------------------- checkpoints
    def save_checkpoint(self, tag: str, arrays: Dict[str, np.ndarray]) -> bool:
        """Save named float64 arrays as ``checkpoints/<tag>.npz``."""
        try:
            self.checkpoint_dir.mkdir(exist_ok=True)
            path = self.checkpoint_dir / f"{tag}.npz"
            np.savez(path, **{name: np.asarray(value, dtype=np.float64) for name, value in arrays.items()})
            log_info(f"Checkpoint saved to {path} ({len(arrays)} tensors)", "Storage")
            return True
        except (OSError, ValueError) as e:
            log_error(f"Failed to save checkpoint {tag}: {e}", "Storage")
            return False

    def load_checkpoint(self, tag: str = "latest") -> Dict[str, np.ndarray]:
        path = self.checkpoint_dir / f"{tag}.npz"
        with np.load(path) as archive:
            arrays = {name: archive[name].copy() for name in archive.files}
        log_info(f"Checkpoint loaded from {path} ({len(arrays)} tensors)", "Storage")
        return arrays

    def has_checkpoint(self, tag: str = "latest") -> bool:
        return (self.checkpoint_dir / f"{tag}.npz").exists()

    # ------------------------------------------------------------------ csv
    def write_csv(self, name: str, columns: Sequence[str], rows: Iterable[Dict[str, Any]]) -> bool:
        path = self.run_dir / name
        try:
            with open(path, 'w', newline='') as f:
                writer = csv.DictWriter(f, fieldnames=list(columns), extrasaction='ignore')
                writer.writeheader()
                for row in rows:
                    writer.writerow(_plain(row))
            log_info(f"CSV written to {path}", "Storage")
            return True
        except (OSError, ValueError) as e:
            log_error(f"Failed to write {path}: {e}", "Storage")
            return False


def _plain(value):
    """Convert numpy scalars and arrays into JSON-ready Python values."""
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    return value
