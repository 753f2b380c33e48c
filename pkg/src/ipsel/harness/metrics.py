"""Per-epoch metrics records and CSV serialization."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path


@dataclass
class MetricsRecord:
    epoch: int
    loss: float
    accuracy: dict[str, float] = field(default_factory=dict)   # per task
    wall_ms_step: float = 0.0      # mean over steps, first/last excluded
    wall_ms_select: float = 0.0
    wall_ms_train: float = 0.0
    ledger_peak_bytes: int = 0
    lr: float = 0.0

    def row(self, task_names) -> dict:
        row = {"epoch": self.epoch, "lr": f"{self.lr:.10g}", "loss": f"{self.loss:.6f}"}
        for t in task_names:
            row[f"acc_{t}"] = f"{self.accuracy.get(t, float('nan')):.6f}"
        if "multi" in self.accuracy and "multi_per_class" in self.accuracy:
            row["acc_multi_per_class"] = f"{self.accuracy['multi_per_class']:.6f}"
        row.update({
            "wall_ms_step": f"{self.wall_ms_step:.3f}",
            "wall_ms_select": f"{self.wall_ms_select:.3f}",
            "wall_ms_train": f"{self.wall_ms_train:.3f}",
            "ledger_peak_bytes": self.ledger_peak_bytes,
        })
        return row


def write_metrics_csv(records, task_names, path) -> None:
    path = Path(path)
    rows = [r.row(task_names) for r in records]
    if not rows:
        return
    fieldnames = list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)
