"""File formats: binary dense matrices, collection manifests, CSV tables."""

from __future__ import annotations

import csv
import json
import struct
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

_HEADER = struct.Struct("<QQ")


def fmt(v) -> str:
    """Round-trip-safe decimal (17 significant digits); integers stay integers."""
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, str):
        return v
    return f"{float(v):.17g}"


def write_matrix(path, a: np.ndarray) -> None:
    """Header of two little-endian uint64 (rows, cols), then row-major float64 LE."""
    a = np.asarray(a, dtype="<f8")
    if a.ndim != 2:
        raise ValueError("only 2-D matrices can be written")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix has non-finite entries")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(*a.shape))
        fh.write(np.ascontiguousarray(a).tobytes(order="C"))


def read_matrix(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated header")
    rows, cols = _HEADER.unpack_from(raw)
    body = raw[_HEADER.size:]
    if len(body) != rows * cols * 8:
        raise ValueError(f"{path}: expected {rows * cols} entries, found {len(body) // 8}")
    a = np.frombuffer(body, dtype="<f8").reshape(rows, cols).astype(float)
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{path}: non-finite entries")
    return a


def write_collection(directory, members: Sequence[np.ndarray], mean: np.ndarray | None = None) -> Path:
    """Write members as ``member_XXXXX.bin`` plus ``collection.json`` listing them in order."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = []
    for m, b in enumerate(members):
        name = f"member_{m:05d}.bin"
        write_matrix(directory / name, b.toarray() if hasattr(b, "toarray") else b)
        names.append(name)
    manifest = {"members": names}
    if mean is not None:
        write_matrix(directory / "mean.bin", mean)
        manifest["mean"] = "mean.bin"
    path = directory / "collection.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def read_collection(manifest_path) -> tuple[list[np.ndarray], np.ndarray | None]:
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "collection.json"
    doc = json.loads(manifest_path.read_text())
    if not isinstance(doc.get("members"), list) or not doc["members"]:
        raise ValueError(f"{manifest_path}: 'members' must be a nonempty list of file names")
    base = manifest_path.parent
    members = [read_matrix(base / name) for name in doc["members"]]
    mean = read_matrix(base / doc["mean"]) if doc.get("mean") else None
    return members, mean


def write_rows(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def write_dicts(path, rows: Sequence[dict], header: Sequence[str] | None = None) -> None:
    header = list(header or (rows[0].keys() if rows else []))
    write_rows(path, header, ([r[h] for h in header] for r in rows))


def write_trajectory(path, times: np.ndarray, nodes: np.ndarray, values: np.ndarray) -> None:
    """Space-time field as ``t, x, y, value`` rows, time-major then row-major nodes."""
    def rows():
        for t, field in zip(times, values):
            for (x, y), v in zip(nodes, field):
                yield t, x, y, v
    write_rows(path, ["t", "x", "y", "value"], rows())


def write_json(path, doc: dict) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")
