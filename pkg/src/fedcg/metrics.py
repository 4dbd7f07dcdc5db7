"""Append-safe delimited metrics persistence."""

from __future__ import annotations

import os
import time
from dataclasses import dataclass

HEADER = "run_id,seed,round,client,metric,value,timestamp"


class MetricsError(ValueError):
    """Malformed metrics file or duplicate record keys."""


@dataclass
class MetricsRecord:
    run_id: str
    seed: int
    round: int
    client: str
    metric: str
    value: float
    timestamp: float = 0.0

    def key(self) -> tuple:
        return (self.run_id, self.seed, self.round, self.client, self.metric)


def _format_value(value: float) -> str:
    return format(float(value), ".17g")


def write_metrics(records: list[MetricsRecord], path) -> None:
    """Append records; the header is written once when the file is created.

    Floats carry 17 significant digits so a reload reproduces them exactly.
    """
    seen: set[tuple] = set()
    for rec in records:
        key = rec.key()
        if key in seen:
            raise MetricsError(f"duplicate metrics key {key}")
        seen.add(key)
    fresh = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", encoding="utf-8") as fh:
        if fresh:
            fh.write(HEADER + "\n")
        for rec in records:
            if "," in rec.run_id or "," in rec.client or "," in rec.metric:
                raise MetricsError(f"fields must not contain commas: {rec}")
            fh.write(f"{rec.run_id},{rec.seed},{rec.round},{rec.client},"
                     f"{rec.metric},{_format_value(rec.value)},{_format_value(rec.timestamp)}\n")


def read_metrics(path) -> list[MetricsRecord]:
    records: list[MetricsRecord] = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if header != HEADER:
            raise MetricsError(f"unexpected metrics header {header!r} in {path}")
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 7:
                raise MetricsError(f"{path}:{lineno}: expected 7 fields, got {len(parts)}")
            records.append(MetricsRecord(
                run_id=parts[0], seed=int(parts[1]), round=int(parts[2]),
                client=parts[3], metric=parts[4], value=float(parts[5]),
                timestamp=float(parts[6])))
    return records


def now() -> float:
    return time.time()
