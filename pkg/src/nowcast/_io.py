"""File helpers: atomic writes, number formatting, hashing."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import tempfile
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
import pyarrow as pa
import pyarrow.csv as pacsv


def fmt(x: float) -> str:
    """Format a real number with 9 significant digits."""
    x = float(x)
    if math.isnan(x):
        return "nan"
    return format(x, ".9g")


def fmt_array(values: np.ndarray) -> np.ndarray:
    return np.array([fmt(v) for v in np.asarray(values, dtype=float)], dtype=object)


def _jsonable(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if math.isnan(x) or math.isinf(x):
            return None
        # round-trip through the 9-significant-digit text form
        return float(fmt(x))
    return obj


def dumps_json(obj: Any) -> str:
    return json.dumps(_jsonable(obj), indent=2, sort_keys=False, ensure_ascii=False) + "\n"


def _file_mode() -> int:
    umask = os.umask(0)
    os.umask(umask)
    return 0o666 & ~umask


_MODE = _file_mode()


class atomic_write:
    """Context manager yielding a binary file that replaces ``path`` on success."""

    def __init__(self, path: str | os.PathLike):
        self.path = Path(path)

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        fd, self._tmp = tempfile.mkstemp(dir=self.path.parent, prefix=f".{self.path.name}.")
        self._fh = os.fdopen(fd, "wb")
        return self._fh

    def __exit__(self, exc_type, exc, tb):
        self._fh.close()
        if exc_type is None:
            # mkstemp creates 0600; give the result ordinary permissions
            os.chmod(self._tmp, _MODE)
            os.replace(self._tmp, self.path)
        else:
            os.unlink(self._tmp)
        return False


def write_json(path: str | os.PathLike, obj: Any) -> None:
    with atomic_write(path) as fh:
        fh.write(dumps_json(obj).encode("utf-8"))


def write_csv(path: str | os.PathLike, header: Sequence[str], columns: Sequence[Iterable]) -> int:
    """Write string-convertible columns as a CSV; returns the row count.

    Float columns must already be formatted (see :func:`fmt_array`).
    """
    arrays = [pa.array([str(v) for v in col], type=pa.string()) for col in columns]
    table = pa.table(dict(zip([f"c{i}" for i in range(len(header))], arrays)))
    with atomic_write(path) as fh:
        fh.write((",".join(header) + "\n").encode("utf-8"))
        if table.num_rows:
            pacsv.write_csv(
                table,
                fh,
                write_options=pacsv.WriteOptions(include_header=False, quoting_style="none"),
            )
    return table.num_rows


def write_csv_rows(path: str | os.PathLike, header: Sequence[str], rows: Iterable[Sequence]) -> int:
    """Small CSVs whose text fields may need quoting (names with commas)."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    n = 0
    for row in rows:
        writer.writerow(row)
        n += 1
    with atomic_write(path) as fh:
        fh.write(buf.getvalue().encode("utf-8"))
    return n


def write_csv_table(path: str | os.PathLike, header: Sequence[str], table: pa.Table) -> int:
    """Write an all-string Arrow table under ``header``."""
    with atomic_write(path) as fh:
        fh.write((",".join(header) + "\n").encode("utf-8"))
        if table.num_rows:
            pacsv.write_csv(
                table,
                fh,
                write_options=pacsv.WriteOptions(include_header=False, quoting_style="none"),
            )
    return table.num_rows


def read_csv_strings(path: str | os.PathLike, header: Sequence[str]) -> pa.Table:
    """Read a CSV whose first line must equal ``header``; every column as string."""
    path = Path(path)
    with open(path, "rb") as fh:
        first = fh.readline().decode("utf-8").strip()
    if first.split(",") != list(header):
        raise ValueError(f"{path}: expected header {','.join(header)!r}, got {first!r}")
    return pacsv.read_csv(
        path,
        convert_options=pacsv.ConvertOptions(
            column_types={c: pa.string() for c in header}, strings_can_be_null=False
        ),
    )


def sha256_file(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def count_rows(path: str | os.PathLike) -> int:
    n = 0
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            n += chunk.count(b"\n")
    return max(n - 1, 0)
