"""Metrics records and their CSV store."""
from __future__ import annotations

import csv
import io
from dataclasses import astuple, dataclass
from pathlib import Path
from typing import Iterable

from .errors import FormatError

HEADER = ("method", "sparsity", "seed", "source_acc", "target_before_ft", "target_after_ft", "wall_time_s")


@dataclass(frozen=True)
class MetricsRecord:
    method_tag: str
    sparsity_ratio: float
    seed: int
    source_acc: float
    target_acc_before_ft: float
    target_acc_after_ft: float
    wall_time_seconds: float

    def same_result(self, other: "MetricsRecord") -> bool:
        """Equality on everything except wall time."""
        return astuple(self)[:-1] == astuple(other)[:-1]


def _row(r: MetricsRecord) -> list[str]:
    # repr round-trips floats exactly
    return [
        r.method_tag,
        repr(float(r.sparsity_ratio)),
        str(int(r.seed)),
        repr(float(r.source_acc)),
        repr(float(r.target_acc_before_ft)),
        repr(float(r.target_acc_after_ft)),
        repr(float(r.wall_time_seconds)),
    ]


def format_metrics(records: Iterable[MetricsRecord], header: bool = True) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    if header:
        writer.writerow(HEADER)
    for r in records:
        writer.writerow(_row(r))
    return out.getvalue()


def export_metrics(records: Iterable[MetricsRecord], path) -> None:
    """Write ``records`` to a fresh CSV file (header always present)."""
    Path(path).write_text(format_metrics(records))


def append_metrics(records: Iterable[MetricsRecord], path) -> None:
    """Append to ``path``, writing the header first when the file is new or empty."""
    path = Path(path)
    fresh = not path.exists() or path.stat().st_size == 0
    with open(path, "a", newline="") as f:
        f.write(format_metrics(records, header=fresh))


def parse_metrics(text: str) -> list[MetricsRecord]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != HEADER:
        raise FormatError(f"metrics CSV must start with the header {','.join(HEADER)}")
    records = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(HEADER):
            raise FormatError(f"metrics CSV line {lineno}: expected {len(HEADER)} fields, got {len(row)}")
        try:
            records.append(
                MetricsRecord(row[0], float(row[1]), int(row[2]), float(row[3]), float(row[4]), float(row[5]), float(row[6]))
            )
        except ValueError as exc:
            raise FormatError(f"metrics CSV line {lineno}: {exc}") from None
    return records


def read_metrics(path) -> list[MetricsRecord]:
    return parse_metrics(Path(path).read_text())
