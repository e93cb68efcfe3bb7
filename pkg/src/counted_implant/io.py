"""Artifact files: CSV tables, JSON records and photon timestamp streams.

All writers go through :func:`atomic_write_text`, which writes a temporary
file in the target directory and renames it into place, so a crashed stage
never leaves a half-written artifact behind.  Floats are formatted with a
fixed number of significant digits so that repeated runs are byte-identical.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import tempfile
from pathlib import Path

import numpy as np

__all__ = [
    "atomic_write_text",
    "write_csv",
    "read_csv",
    "read_csv_columns",
    "write_json",
    "read_json",
    "write_timestamps",
    "read_timestamps",
    "sha256_file",
    "fmt",
]

SIG_DIGITS = 10


def fmt(value) -> str:
    """Canonical text form of a table cell."""
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        v = float(value)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return f"{v:.{SIG_DIGITS}g}"
    return str(value)


def atomic_write_text(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def write_csv(path, header, rows) -> Path:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) for v in row])
    return atomic_write_text(path, buf.getvalue())


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def read_csv_columns(path, dtypes: dict | None = None) -> dict:
    """Columns of a CSV file as numpy arrays (float unless ``dtypes`` says otherwise)."""
    rows = read_csv(path)
    with open(path, newline="") as fh:
        header = next(csv.reader(fh))
    dtypes = dtypes or {}
    out = {}
    for name in header:
        dt = dtypes.get(name, float)
        vals = [r[name] for r in rows]
        if dt is str:
            out[name] = np.array(vals, dtype=object)
        else:
            out[name] = np.array([float(v) for v in vals]).astype(dt)
    return out


def _jsonable(obj):
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
        v = float(obj)
        if not math.isfinite(v):
            return fmt(v)
        return float(fmt(v))
    return obj


def write_json(path, obj) -> Path:
    text = json.dumps(_jsonable(obj), sort_keys=True, indent=2) + "\n"
    return atomic_write_text(path, text)


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def write_timestamps(path, t_ns) -> Path:
    """One integer picosecond timestamp per line."""
    ps = np.rint(np.asarray(t_ns, dtype=float) * 1e3).astype(np.int64)
    text = "\n".join(map(str, ps.tolist()))
    return atomic_write_text(path, text + ("\n" if ps.size else ""))


def read_timestamps(path) -> np.ndarray:
    """Timestamps in ns from a picosecond file."""
    text = Path(path).read_text().split()
    ps = np.array(text, dtype=np.int64)
    return ps.astype(float) * 1e-3


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()
