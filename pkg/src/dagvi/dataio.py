"""CSV ingestion and export."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from dagvi.sem import Dataset


class CsvFormatError(ValueError):
    pass


def _parse_float(cell: str) -> Optional[float]:
    try:
        return float(cell)
    except ValueError:
        return None


def ingest_csv(path, center: bool = True, header: Optional[bool] = None) -> Dataset:
    """Read a comma-separated numeric matrix.

    A header is assumed when the first row has any non-numeric cell, unless
    ``header`` forces the choice.  Errors name the 1-based line and column.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such data file: {path}")
    with open(path, newline="") as fh:
        rows = [row for row in csv.reader(fh)]
    lines = [(k + 1, [c.strip() for c in row]) for k, row in enumerate(rows) if any(c.strip() for c in row)]
    if not lines:
        raise CsvFormatError(f"{path}: empty file")

    names = None
    first = lines[0][1]
    if header is None:
        header = any(_parse_float(c) is None for c in first)
    if header:
        names = first
        lines = lines[1:]
    if not lines:
        raise CsvFormatError(f"{path}: no data rows")

    width = len(names) if names is not None else len(lines[0][1])
    values = np.empty((len(lines), width))
    for r, (lineno, row) in enumerate(lines):
        if len(row) != width:
            raise CsvFormatError(f"{path}: line {lineno} has {len(row)} fields, expected {width}")
        for c, cell in enumerate(row):
            x = _parse_float(cell)
            if x is None or not np.isfinite(x):
                raise CsvFormatError(f"{path}: line {lineno}, column {c + 1}: non-numeric cell {cell!r}")
            values[r, c] = x
    if center:
        values = values - values.mean(axis=0)
    meta = {"columns": names, "centered": center}
    return Dataset(values, source="csv", path=path, meta=meta)


def export_csv(data, path, names: Optional[Sequence[str]] = None) -> None:
    values = data.values if isinstance(data, Dataset) else np.asarray(data, dtype=np.float64)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        if names is not None:
            writer.writerow(list(names))
        for row in values:
            writer.writerow([repr(float(x)) for x in row])
