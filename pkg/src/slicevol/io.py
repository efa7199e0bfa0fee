"""On-disk formats: ``.seg3d`` volumes, ``.slice2d`` slice stacks, weight blobs and CSVs."""

from __future__ import annotations

import csv
import gzip
import json
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def _write_raw(path: Path, array: np.ndarray, meta: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = np.ascontiguousarray(array, dtype="<u1").tobytes(order="C")
    # mtime=0 keeps the gzip stream byte-identical across reruns
    with open(path, "wb") as raw, gzip.GzipFile(fileobj=raw, mode="wb", mtime=0) as fh:
        fh.write(data)
    _sidecar(path).write_text(json.dumps(meta, indent=2) + "\n")


def _read_raw(path: Path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    meta = json.loads(_sidecar(path).read_text())
    with gzip.open(path, "rb") as fh:
        buf = fh.read()
    dims = tuple(int(d) for d in meta["dims"])
    array = np.frombuffer(buf, dtype="<u1")
    if array.size != int(np.prod(dims)):
        raise ValueError(f"{path}: payload has {array.size} bytes, expected dims {dims}")
    return array.reshape(dims).copy(), meta


def write_seg3d(path, data: np.ndarray, voxel_size_mm: Sequence[float], case_id: str) -> None:
    meta = {
        "case_id": case_id,
        "dims": [int(d) for d in data.shape],
        "voxel_size_mm": [float(v) for v in voxel_size_mm],
    }
    _write_raw(Path(path), data, meta)


def read_seg3d(path) -> tuple[np.ndarray, tuple[float, float, float], str]:
    array, meta = _read_raw(Path(path))
    if array.ndim != 3:
        raise ValueError(f"{path}: expected 3 dims, got {array.ndim}")
    return array, tuple(float(v) for v in meta["voxel_size_mm"]), str(meta["case_id"])


def write_slice2d(path, views: np.ndarray, case_id: str) -> None:
    """Store a ``[views, H, W]`` binary stack."""
    if views.ndim != 3:
        raise ValueError("slice2d payload must be [views, H, W]")
    _write_raw(Path(path), views, {"case_id": case_id, "dims": [int(d) for d in views.shape]})


def read_slice2d(path) -> tuple[np.ndarray, str]:
    array, meta = _read_raw(Path(path))
    return array, str(meta["case_id"])


def export_png(path, image: np.ndarray) -> None:
    from PIL import Image

    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((np.asarray(image) > 0).astype(np.uint8) * 255, mode="L").save(path)


def _with_ext(stem: Path, ext: str) -> Path:
    # appended rather than substituted, so dotted stems keep their full name
    return stem.with_name(stem.name + ext)


def write_weights(stem, tensors: Mapping[str, np.ndarray]) -> None:
    """Write ``<stem>.bin`` (little-endian float32) and ``<stem>.json`` (tensor table)."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    table = []
    offset = 0
    with open(_with_ext(stem, ".bin"), "wb") as fh:
        for name, value in tensors.items():
            arr = np.ascontiguousarray(value, dtype="<f4")
            fh.write(arr.tobytes())
            table.append({"name": name, "shape": list(arr.shape), "dtype": "float32",
                          "byte_offset": offset})
            offset += arr.nbytes
    _with_ext(stem, ".json").write_text(json.dumps(table, indent=1) + "\n")


def read_weights(stem) -> dict[str, np.ndarray]:
    stem = Path(stem)
    table = json.loads(_with_ext(stem, ".json").read_text())
    blob = _with_ext(stem, ".bin").read_bytes()
    out = {}
    for entry in table:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=entry["byte_offset"])
        out[entry["name"]] = arr.reshape(shape).copy()
    return out


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def read_csv(path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _fmt(value) -> str:
    if value is None:
        return "n/a"
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)
