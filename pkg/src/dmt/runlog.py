"""Append-only JSON-lines run records."""

from __future__ import annotations

import json
import time
from pathlib import Path

LOG_NAME = "run.jsonl"


def log_path(out_dir: str | Path) -> Path:
    return Path(out_dir) / LOG_NAME


def append_event(out_dir: str | Path, event: dict, config_hash: str) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entry = {"time": time.time(), "config_hash": config_hash, **event}
    with log_path(out_dir).open("a", encoding="utf-8") as f:
        f.write(json.dumps(entry) + "\n")
    return entry


def read_events(out_dir: str | Path) -> list[dict]:
    path = log_path(out_dir)
    if not path.exists():
        return []
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def completed_iterations(events: list[dict], run_kind: str) -> int:
    """Highest contiguous completed iteration for a run kind (-1 = none)."""
    done = {
        e["iteration"]
        for e in events
        if e.get("event") == "iteration_completed" and e.get("run") == run_kind
    }
    k = -1
    while k + 1 in done:
        k += 1
    return k
