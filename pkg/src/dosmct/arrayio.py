"""Bit-exact array files and 8-bit previews.

Arrays are stored as raw little-endian float32 (C order) with a JSON sidecar
carrying shape/dtype plus whatever metadata the caller records (geometry
hash, noise spec, display window). The format is deliberately trivial so any
language can read it back byte-for-byte.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

__all__ = ["write_array", "read_array", "sidecar_path", "write_pgm", "write_csv", "read_csv"]

RAW_SUFFIX = ".f32raw"


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_suffix(path.suffix + ".json") if path.suffix != RAW_SUFFIX \
        else path.with_suffix(".json")


def write_array(path, values: np.ndarray, meta: dict | None = None) -> Path:
    """Write ``values`` as <path>.f32raw + JSON sidecar; returns the raw path."""
    path = Path(path)
    if path.suffix != RAW_SUFFIX:
        path = path.with_suffix(RAW_SUFFIX)
    arr = np.ascontiguousarray(values, dtype="<f4")
    doc = {
        "shape": list(arr.shape),
        "dtype": "float32",
        "byte_order": "little",
        "order": "C",
    }
    if meta:
        doc.update(meta)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(arr.tobytes())
    with open(sidecar_path(path), "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return path


def read_array(path) -> tuple[np.ndarray, dict]:
    """Read a .f32raw file; returns (float32 array, sidecar metadata)."""
    path = Path(path)
    with open(sidecar_path(path)) as fh:
        meta = json.load(fh)
    raw = np.fromfile(path, dtype="<f4")
    shape = tuple(meta["shape"])
    if raw.size != int(np.prod(shape)):
        raise ValueError(f"{path}: payload has {raw.size} values, sidecar says {shape}")
    return raw.reshape(shape), meta


def write_pgm(path, values: np.ndarray, window: tuple[float, float] | None = None) -> Path:
    """8-bit P5 preview with the display window recorded in a sidecar.

    Rows are flipped so +y points up on screen, matching the grid convention.
    """
    path = Path(path)
    arr = np.asarray(values, dtype=np.float64)
    if window is None:
        window = (float(arr.min()), float(arr.max()))
    lo, hi = window
    span = hi - lo if hi > lo else 1.0
    scaled = np.clip((arr - lo) / span, 0.0, 1.0)
    img8 = np.round(scaled * 255.0).astype(np.uint8)[::-1, :]
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img8.shape[1]} {img8.shape[0]}\n255\n".encode())
        fh.write(img8.tobytes())
    with open(sidecar_path(path), "w") as fh:
        json.dump({"window": [lo, hi], "format": "pgm", "rows_flipped": True}, fh, indent=1)
        fh.write("\n")
    return path


def write_csv(path, header: list[str], rows) -> Path:
    """Plain CSV with full float round-trip precision."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_csv_cell(v) for v in row) + "\n")
    return path


def _csv_cell(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (np.floating,)):
        return repr(float(v))
    return str(v)


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    header = lines[0].split(",")
    return header, [ln.split(",") for ln in lines[1:]]
