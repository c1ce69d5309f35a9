"""CSV emission with a fixed numeric formatting rule.

All floats are written with 9 significant digits (``%.9g``), so identical
numbers always produce identical bytes and reruns of a stage yield
byte-identical files.
"""

from __future__ import annotations

import csv
from pathlib import Path


def format_value(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return f"{value:.9g}"
    return str(value)


def write_csv(path, fieldnames: list, rows: list) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(fieldnames)
        for row in rows:
            writer.writerow([format_value(row.get(name)) for name in fieldnames])


def read_csv(path) -> list:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))
