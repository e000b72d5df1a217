"""
Run event logging and metric tables.

Events (epoch losses, early stops, cell failures) go to a JSONL file
through a background writer so training never blocks on disk. Final
per-seed metrics go to a CSV table and a JSON mean/std summary; neither
carries timestamps, so equal configs give byte-identical tables.

Usage:
    events = MetricsWriter(run_dir / "events.jsonl")
    log_epoch(events, seed=0, epoch=3, train_loss=0.41, val_f1=0.78)
    events.shutdown()
"""

import json
import threading
import time
from pathlib import Path
from queue import Empty, Queue
from typing import Any, Dict, List, Optional, Sequence

import pandas as pd

from .evalkit import summarize_metrics
from .storage import write_json, write_text
from .types import RunMetrics


METRIC_COLUMNS = ["accuracy", "auc", "macro_f1", "hit_ratio_at_2", "best_val_f1", "epochs"]


class MetricsWriter:
    """
    Thread-safe JSONL event writer with batched appends.
    Matrix cells and the training loop share one instance per run.
    """

    def __init__(self, events_file: Path):
        self.events_file = Path(events_file)
        self._queue: Queue[dict] = Queue()
        self._shutdown = threading.Event()
        self._writer_thread = threading.Thread(target=self._writer_loop, daemon=True)
        self._writer_thread.start()

    def log(self, event: str, **kwargs: Any) -> None:
        """Queue an event. Non-blocking."""
        self._queue.put({"ts": time.time(), "event": event, **kwargs})

    def _drain(self) -> List[dict]:
        entries = []
        while True:
            try:
                entries.append(self._queue.get_nowait())
            except Empty:
                return entries

    def _writer_loop(self) -> None:
        while not self._shutdown.is_set():
            try:
                entries = [self._queue.get(timeout=0.5)] + self._drain()
                self._write_entries(entries)
            except Empty:
                continue
            except Exception as e:
                print(f"[Events] writer error: {e}")

    def _write_entries(self, entries: List[dict]) -> None:
        try:
            self.events_file.parent.mkdir(parents=True, exist_ok=True)
            with open(self.events_file, "a") as f:
                for entry in entries:
                    f.write(json.dumps(entry, default=str) + "\n")
        except Exception as e:
            print(f"[Events] failed to write {len(entries)} events: {e}")

    def flush(self) -> None:
        entries = self._drain()
        if entries:
            self._write_entries(entries)

    def shutdown(self) -> None:
        self._shutdown.set()
        self._writer_thread.join(timeout=2.0)
        self.flush()

    def __enter__(self) -> "MetricsWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.shutdown()


# Typed helpers for consistent event records

def log_epoch(
    events: Optional[MetricsWriter],
    seed: int,
    epoch: int,
    train_loss: float,
    val_f1: float,
    cell: str = "",
) -> None:
    if events:
        events.log("epoch", cell=cell, seed=seed, epoch=epoch, train_loss=train_loss, val_f1=val_f1)


def log_early_stop(
    events: Optional[MetricsWriter],
    seed: int,
    epoch: int,
    best_val_f1: float,
    cell: str = "",
) -> None:
    if events:
        events.log("early_stop", cell=cell, seed=seed, epoch=epoch, best_val_f1=best_val_f1)


def log_seed_complete(
    events: Optional[MetricsWriter],
    record: RunMetrics,
    wall_seconds: float,
    cell: str = "",
) -> None:
    if events:
        events.log(
            "seed_complete",
            cell=cell,
            seed=record.seed,
            accuracy=record.accuracy,
            auc=record.auc,
            macro_f1=record.macro_f1,
            hit_ratio_at_2=record.hit_ratio_at_2,
            wall_seconds=wall_seconds,
        )


def log_cell_failure(events: Optional[MetricsWriter], cell: str, error: str) -> None:
    if events:
        events.log("cell_failure", cell=cell, error=error[:500])


# Tables

def record_row(record: RunMetrics, **labels: Any) -> Dict[str, Any]:
    row = dict(labels)
    row["seed"] = record.seed
    for column in METRIC_COLUMNS:
        row[column] = getattr(record, column)
    row["error"] = ""
    return row


def write_metrics_csv(path: Path, rows: Sequence[Dict[str, Any]]) -> pd.DataFrame:
    """One row per seed (per cell); fixed float format keeps reruns byte-identical."""
    frame = pd.DataFrame(list(rows))
    write_text(path, frame.to_csv(index=False, float_format="%.6f"))
    return frame


def write_summary(path: Path, records: Sequence[RunMetrics], **context: Any) -> Dict:
    summary = {**context, "metrics": summarize_metrics(records), "seeds": [r.seed for r in records]}
    write_json(path, summary)
    return summary
