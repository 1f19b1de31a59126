"""Raw float64 blobs with JSON sidecars, and 17-digit CSV tables."""
from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path

import numpy as np


def _stem(path) -> Path:
    path = Path(path)
    return path.with_suffix("") if path.suffix in (".json", ".f64") else path


def sidecar(path) -> Path:
    stem = _stem(path)
    return stem.with_name(stem.name + ".json")


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def file_sha256(path) -> str:
    return sha256_bytes(Path(path).read_bytes())


def write_blob(path, header: dict, arrays: dict) -> list[Path]:
    """Write ``arrays`` (name -> ndarray) to ``<stem>.f64`` and ``header`` to ``<stem>.json``.

    Arrays are stored little-endian, row-major, back to back; the sidecar
    records each array's shape and element offset plus a sha256 of the blob.
    """
    stem = _stem(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    layout, chunks, offset = {}, [], 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        layout[name] = {"shape": list(arr.shape), "offset": offset}
        offset += arr.size
        chunks.append(arr.tobytes(order="C"))
    blob = b"".join(chunks)
    bin_path = stem.with_name(stem.name + ".f64")
    json_path = stem.with_name(stem.name + ".json")
    bin_path.write_bytes(blob)
    full = dict(header)
    full["blob"] = {"file": bin_path.name, "dtype": "<f8", "arrays": layout, "sha256": sha256_bytes(blob)}
    json_path.write_text(json.dumps(full, indent=2, sort_keys=True) + "\n")
    return [json_path, bin_path]


def read_blob(path, verify: bool = True) -> tuple[dict, dict]:
    stem = _stem(path)
    header = json.loads(stem.with_name(stem.name + ".json").read_text())
    info = header["blob"]
    blob = (stem.parent / info["file"]).read_bytes()
    if verify and sha256_bytes(blob) != info["sha256"]:
        raise ValueError(f"content hash mismatch for {stem}")
    flat = np.frombuffer(blob, dtype="<f8")
    arrays = {}
    for name, spec in info["arrays"].items():
        size = int(np.prod(spec["shape"], dtype=np.int64))
        arrays[name] = flat[spec["offset"]:spec["offset"] + size].reshape(spec["shape"]).astype(np.float64)
    return header, arrays


def fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    return str(value)


def write_csv(path, columns, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\r\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([fmt(v) for v in row])
    return path


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")
    return path


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"not JSON serializable: {type(obj)!r}")
