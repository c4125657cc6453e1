"""Event log and metrics log.

Events go to stdout and, optionally, an append-only JSONL file you can
inspect with cat, grep and jq. Metrics go to a fixed-column text file with
no timestamps, so identical runs produce identical files.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path


@dataclass
class Event:
    """A record of something that happened. Append-only.

    Event kinds:
      run_start         - A training run began
      iter              - One optimizer step finished
      eval              - Validation metrics were computed
      checkpoint_saved  - Parameters were written to disk
      run_end           - A training run finished
      nonfinite_loss    - Training aborted on a NaN/inf loss
      variant_start     - A comparison variant/seed run began
      variant_end       - A comparison variant/seed run finished
      heatmap_written   - A PGM heatmap was written
      heatmap_constant  - A constant map was written with the fallback rule
      gradcheck_case    - One gradient audit case was checked
      config_echoed     - The resolved config was written out
      data_exported     - A synthetic sample was exported
    """

    kind: str
    source: str = ""
    data: dict = field(default_factory=dict)
    timestamp: datetime = field(default_factory=lambda: datetime.now(timezone.utc))


class EventLog:
    """Append-only event log. Safe to share between worker threads."""

    def __init__(self, path: Path | None = None, echo: bool = True):
        self.path = path
        self.echo = echo
        self.events: list[Event] = []
        self._lock = threading.Lock()

    def record(self, event: Event) -> None:
        with self._lock:
            self.events.append(event)

            if self.echo:
                ts = event.timestamp.strftime("%H:%M:%S.%f")[:-3]
                print(f"[{ts}] {event.kind:18s} | {event.source:16s} | {_fmt(event.data)}", flush=True)

            if self.path:
                line = json.dumps(
                    {
                        "ts": event.timestamp.isoformat(),
                        "kind": event.kind,
                        "source": event.source,
                        "data": event.data,
                    },
                    ensure_ascii=False,
                )
                with open(self.path, "a", encoding="utf-8") as f:
                    f.write(line + "\n")

    def record_event(self, kind: str, source: str = "", data: dict | None = None) -> None:
        self.record(Event(kind=kind, source=source, data=data or {}))

    def of_kind(self, kind: str) -> list[Event]:
        return [e for e in self.events if e.kind == kind]


def _fmt(data: dict) -> str:
    parts = []
    for k, v in data.items():
        s = f"{v:.6g}" if isinstance(v, float) else str(v)
        if len(s) > 80:
            s = s[:77] + "..."
        parts.append(f"{k}={s}")
    return ", ".join(parts)


class MetricsLog:
    """Plain-text metrics table: a header line, then one row per logged iteration.

    Columns: iter lr loss loss_main loss_s1 .. loss_s{S-1} [loss_head] train_acc val_acc val_miou.
    loss_head is present only for a network whose head emits its own class scores.
    Values absent at a given iteration are written as ``-``.
    """

    def __init__(self, path: Path, stages: int, head: bool = False):
        self.path = Path(path)
        self.columns = ["iter", "lr", "loss", "loss_main"]
        self.columns += [f"loss_s{s}" for s in range(1, stages)]
        if head:
            self.columns.append("loss_head")
        self.columns += ["train_acc", "val_acc", "val_miou"]
        self.path.write_text(" ".join(self.columns) + "\n", encoding="utf-8")

    def write(self, row: dict) -> None:
        unknown = set(row) - set(self.columns)
        if unknown:
            raise KeyError(f"unknown metrics columns {sorted(unknown)}")
        cells = [_cell(row.get(c)) for c in self.columns]
        with open(self.path, "a", encoding="utf-8") as f:
            f.write(" ".join(cells) + "\n")


def _cell(value) -> str:
    if value is None:
        return "-"
    if isinstance(value, float):
        return f"{value:.8e}"
    return str(value)
